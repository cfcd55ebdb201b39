//! Times phase-1 and phase-2 steps on real data.

use std::time::Instant;

use tdfn::config::TrainConfig;
use tdfn::data::{default_data_dir, Dataset, Split};
use tdfn::geometry::{Architecture, Geometry};
use tdfn::model::TdfnModel;
use tdfn::train::{PolicyTrainer, TaskTrainer};

fn main() -> tdfn::Result<()> {
    let data = Dataset::load(&default_data_dir(), Split::Train, 32)?.truncated(2048);
    let batch: usize = std::env::args().nth(1).map_or(64, |s| s.parse().unwrap());
    let config = TrainConfig {
        batch_size: batch,
        fpg_batch_size: batch,
        ..TrainConfig::default()
    };
    let model = TdfnModel::new(Geometry::default(), Architecture::default(), 0)?;
    let mut task = TaskTrainer::new(model.clone(), config.clone())?;
    let idx: Vec<usize> = (0..batch).collect();
    for n in [0, 8, 16] {
        let t = Instant::now();
        let reps = 3;
        for _ in 0..reps {
            task.step(&data, &idx, n)?;
        }
        let per = t.elapsed().as_secs_f64() / (reps * batch) as f64;
        println!("phase1 n={n:2}: {:.2} ms/sample", per * 1e3);
    }
    split(&model, &data, batch, 8)?;
    let mut policy = PolicyTrainer::new(model, config)?;
    let t = Instant::now();
    policy.episode_batch(&data, &idx)?;
    println!("phase2 episode: {:.2} ms/sample", t.elapsed().as_secs_f64() * 1e3 / batch as f64);
    Ok(())
}

#[allow(dead_code)]
fn split(model: &TdfnModel, data: &Dataset, b: usize, n: usize) -> tdfn::Result<()> {
    use tdfn::model::{crop_region, pool_lowres, is_fpg_param};
    use tdfn_tensor::{Tape, Tensor};
    let g = model.geometry;
    let idx: Vec<usize> = (0..b).collect();
    let regions: Vec<Vec<usize>> = idx.iter().map(|_| (0..n).collect()).collect();
    let images: Vec<f32> = idx.iter().flat_map(|&i| data.image(i).to_vec()).collect();
    let lowres: Vec<f32> = idx.iter().flat_map(|&i| pool_lowres(&g, data.image(i))).collect();
    let rois: Vec<f32> = idx.iter().flat_map(|&i| (0..n).flat_map(move |r| crop_region(&g, data.image(i), r))).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| data.label(i)).collect();
    let t0 = Instant::now();
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape, |s| !is_fpg_param(s));
    let t1 = Instant::now();
    let lrc = model.lrc_pairs(&mut tape, &p, &lowres, b)?;
    let t2 = Instant::now();
    let hrc = model.hrc_pairs(&mut tape, &p, &rois, b * n)?;
    let t3 = Instant::now();
    let (cls, rec) = model.he_readouts(&mut tape, &p, lrc, Some(hrc), &regions)?;
    let t4 = Instant::now();
    let logits = model.class_logits(&mut tape, &p, cls)?;
    let recon = model.reconstruction(&mut tape, &p, rec)?;
    let ce = tape.cross_entropy(logits, &labels)?;
    let target = tape.constant(Tensor::new(&[b, 1024], images)?);
    let m = tape.mse(recon, target)?;
    let loss = tape.add(ce, m)?;
    let t5 = Instant::now();
    tape.backward(loss)?;
    let t6 = Instant::now();
    println!("bind {:?} lrc {:?} hrc {:?} he {:?} heads {:?} backward {:?}", t1-t0, t2-t1, t3-t2, t4-t3, t5-t4, t6-t5);
    Ok(())
}
