//! Short end-to-end run: phase 1, random-policy sweep, phase 2, FPG sweep.
//!
//! Usage: experiment <epochs1> <train_limit> <epochs2> <fpg_limit> <fpg_lr> <eval_limit> <batch>

use std::time::Instant;

use tdfn::checkpoint::save_checkpoint;
use tdfn::config::TrainConfig;
use tdfn::data::{default_data_dir, Dataset, Split};
use tdfn::eval::{evaluate_budgets, evaluate_mcp_sweep, Policy};
use tdfn::fixation::SampleMode;
use tdfn::geometry::{Architecture, Geometry};
use tdfn::model::TdfnModel;
use tdfn::train::{train_fpg_phase, train_task_phase};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> tdfn::Result<()> {
    let dir = default_data_dir();
    let train = Dataset::load(&dir, Split::Train, 32)?;
    let val = Dataset::load(&dir, Split::Validation, 32)?;
    let config = TrainConfig {
        epochs_phase1: arg(1, 1),
        train_limit: arg(2, 10_000),
        epochs_phase2: arg(3, 1),
        fpg_train_limit: arg(4, 5_000),
        fpg_learning_rate: arg(5, 1e-4),
        batch_size: arg(7, 64),
        fpg_batch_size: arg(7, 64),
        ..TrainConfig::default()
    };
    let eval_limit = arg(6, 2000);
    let budgets = [0, 1, 2, 4, 8, 12, 16];
    let t = Instant::now();
    let model = TdfnModel::new(Geometry::default(), Architecture::default(), config.seed)?;
    let task = train_task_phase(model, &train, &config, |m, _| {
        println!("{} [{:.0}s]", m.csv_line(), t.elapsed().as_secs_f64());
        Ok(())
    })?;
    save_checkpoint(&task.checkpoint(), std::path::Path::new("/tmp/exp_phase1.tdfn"))?;
    for r in evaluate_budgets(&task.model, &val, Policy::Random, SampleMode::Sample, &budgets, 1, eval_limit)? {
        println!("{r}");
    }
    println!("[{:.0}s]", t.elapsed().as_secs_f64());
    let policy = train_fpg_phase(task.model, &train, &config, |m, _| {
        println!("{} [{:.0}s]", m.csv_line(), t.elapsed().as_secs_f64());
        Ok(())
    })?;
    save_checkpoint(&policy.checkpoint(), std::path::Path::new("/tmp/exp_phase2.tdfn"))?;
    for mode in [SampleMode::Argmax, SampleMode::Sample] {
        for r in evaluate_budgets(&policy.model, &val, Policy::Fpg, mode, &budgets, 1, eval_limit)? {
            println!("{mode:?} {r}");
        }
    }
    for r in evaluate_mcp_sweep(&policy.model, &val, SampleMode::Sample, &[0.7, 0.8, 0.9, 0.95, 0.98], 1, eval_limit)? {
        println!("{r}");
    }
    println!("[{:.0}s]", t.elapsed().as_secs_f64());
    Ok(())
}
