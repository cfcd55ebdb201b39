//! Batched fixation episodes run in lockstep.
//!
//! Channel outputs do not depend on what the hybrid encoder has seen, so the
//! LRC pair and the HRC pair of every region are computed once per sample up
//! front. Each step then only reruns the hybrid encoder over the pairs
//! selected so far.

use tdfn_tensor::{Tape, Tensor};

use crate::error::{Error, Result};
use crate::fixation::{RegionSet, SaliencyMap};
use crate::model::{crop_region, pool_lowres, TdfnModel};

/// Outputs of the hybrid encoder and heads for a set of samples.
#[derive(Clone, Debug, Default)]
pub struct Readout {
    /// `[A, classes]`
    pub logits: Vec<f32>,
    /// `[A, image_pixels]`, unclamped.
    pub recon: Vec<f32>,
    /// `[A, dim]`
    pub cls: Vec<f32>,
    /// `[A, dim]`
    pub rec: Vec<f32>,
}

pub struct EpisodeBatch<'m> {
    model: &'m TdfnModel,
    images: Vec<f32>,
    lrc: Vec<f32>,
    hrc: Vec<f32>,
    regions: Vec<Vec<usize>>,
}

impl<'m> EpisodeBatch<'m> {
    /// Precomputes channel outputs for `images` (each `image_pixels` long).
    pub fn new(model: &'m TdfnModel, images: &[&[f32]]) -> Result<Self> {
        let g = &model.geometry;
        let b = images.len();
        if b == 0 {
            return Err(Error::EmptyDataset);
        }
        if let Some(bad) = images.iter().find(|im| im.len() != g.image_pixels()) {
            return Err(Error::InputShape {
                expected: format!("{}-pixel image", g.image_pixels()),
                got: vec![bad.len()],
            });
        }
        let regions = g.num_regions();
        let lowres: Vec<f32> = images.iter().flat_map(|im| pool_lowres(g, im)).collect();
        let rois: Vec<f32> = images
            .iter()
            .flat_map(|im| (0..regions).flat_map(move |r| crop_region(g, im, r)))
            .collect();
        let mut tape = Tape::new();
        let p = model.bind_frozen(&mut tape);
        let lrc = model.lrc_pairs(&mut tape, &p, &lowres, b)?;
        let hrc = model.hrc_pairs(&mut tape, &p, &rois, b * regions)?;
        Ok(EpisodeBatch {
            model,
            images: images.concat(),
            lrc: tape.data(lrc).to_vec(),
            hrc: tape.data(hrc).to_vec(),
            regions: vec![Vec::new(); b],
        })
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn image(&self, sample: usize) -> &[f32] {
        let px = self.model.geometry.image_pixels();
        &self.images[sample * px..(sample + 1) * px]
    }

    pub fn regions(&self, sample: usize) -> &[usize] {
        &self.regions[sample]
    }

    pub fn visited(&self, sample: usize) -> RegionSet {
        RegionSet::from_regions(&self.regions[sample])
    }

    pub fn fixate(&mut self, sample: usize, region: usize) -> Result<()> {
        self.model.check_region(region)?;
        if self.regions[sample].contains(&region) {
            return Err(Error::Memory(format!("region {region} already fixated")));
        }
        self.regions[sample].push(region);
        Ok(())
    }

    /// Runs the hybrid encoder and heads for `active` samples, which must all
    /// hold the same number of fixations.
    pub fn readout(&self, active: &[usize]) -> Result<Readout> {
        if active.is_empty() {
            return Ok(Readout::default());
        }
        let dim = self.model.geometry.embed_dim;
        let pair = 2 * dim;
        let per_sample = self.model.geometry.num_regions() * pair;
        let regions: Vec<Vec<usize>> = active.iter().map(|&s| self.regions[s].clone()).collect();
        let lrc: Vec<f32> = active
            .iter()
            .flat_map(|&s| self.lrc[s * pair..(s + 1) * pair].iter().copied())
            .collect();
        let hrc: Vec<f32> = active
            .iter()
            .flat_map(|&s| {
                self.regions[s]
                    .iter()
                    .flat_map(move |&r| self.hrc[s * per_sample + r * pair..][..pair].iter().copied())
            })
            .collect();
        let a = active.len();
        let mut tape = Tape::new();
        let p = self.model.bind_frozen(&mut tape);
        let lrc = tape.constant(Tensor::new(&[2 * a, dim], lrc)?);
        let hrc = if hrc.is_empty() {
            None
        } else {
            let rows = hrc.len() / dim;
            Some(tape.constant(Tensor::new(&[rows, dim], hrc)?))
        };
        let (cls, rec) = self.model.he_readouts(&mut tape, &p, lrc, hrc, &regions)?;
        let logits = self.model.class_logits(&mut tape, &p, cls)?;
        let recon = self.model.reconstruction(&mut tape, &p, rec)?;
        Ok(Readout {
            logits: tape.data(logits).to_vec(),
            recon: tape.data(recon).to_vec(),
            cls: tape.data(cls).to_vec(),
            rec: tape.data(rec).to_vec(),
        })
    }
}

/// Saliency maps for a batch of rec readouts (`[A, dim]`).
pub fn saliency_batch(model: &TdfnModel, rec: &[f32]) -> Result<Vec<SaliencyMap>> {
    let dim = model.geometry.embed_dim;
    if rec.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let p = model.bind_frozen(&mut tape);
    let x = tape.constant(Tensor::new(&[rec.len() / dim, dim], rec.to_vec())?);
    let logits = model.fpg_logits(&mut tape, &p, x)?;
    let probs = tape.softmax(logits, 1)?;
    tape.data(probs)
        .chunks(model.geometry.num_regions())
        .map(|row| SaliencyMap::new(row.to_vec()))
        .collect()
}

/// Row-wise softmax in f64.
pub fn softmax_rows(logits: &[f32], width: usize) -> Vec<f32> {
    logits
        .chunks(width)
        .flat_map(|row| {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
            let exps: Vec<f64> = row.iter().map(|&x| (x as f64 - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            exps.into_iter().map(move |e| (e / total) as f32)
        })
        .collect()
}
