//! The dual-resolution network: low-resolution channel (LRC),
//! high-resolution channel (HRC), hybrid encoder (HE) over an explicit work
//! memory, and the classifier / reconstructor / fixation heads.
//!
//! Batched entry points take a [`Tape`] and [`Bound`] parameters so the
//! same code serves training (tracked leaves) and inference (constants).
//! The per-sample methods at the bottom wrap them for single images.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tdfn_tensor::{Element, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::fixation::SaliencyMap;
use crate::geometry::{Architecture, Geometry};
use crate::params::{normal_table, Activation, Bound, Linear, ParamId, ParamStore, TwoLayer};
use crate::transformer::{ChannelTable, EncoderStack, PositionalTable, TABLE_INIT_STD};

/// Parameter-name prefix of the fixation point generator head.
pub const FPG_PREFIX: &str = "fpg.";

pub fn is_fpg_param(name: &str) -> bool {
    name.starts_with(FPG_PREFIX)
}

/// Where a token pair came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Lrc,
    /// `ordinal` counts fixations from 1.
    Hrc { region: usize, ordinal: usize },
}

/// The class / reconstruction token pair a channel emits.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenPair {
    pub cls_token: Tensor,
    pub rec_token: Tensor,
    pub source: Source,
}

impl TokenPair {
    pub fn region(&self) -> Option<usize> {
        match self.source {
            Source::Lrc => None,
            Source::Hrc { region, .. } => Some(region),
        }
    }

    pub fn ordinal(&self) -> Option<usize> {
        match self.source {
            Source::Lrc => None,
            Source::Hrc { ordinal, .. } => Some(ordinal),
        }
    }
}

/// Token sequence the hybrid encoder attends over: the LRC pair followed by
/// one HRC pair per fixation, in fixation order.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkMemory {
    pairs: Vec<TokenPair>,
}

impl WorkMemory {
    pub fn new(lrc: TokenPair) -> Result<Self> {
        if lrc.source != Source::Lrc {
            return Err(Error::Memory("work memory must start with the LRC pair".into()));
        }
        Ok(WorkMemory { pairs: vec![lrc] })
    }

    /// Appends the pair of the next fixation.
    pub fn append(&mut self, pair: TokenPair) -> Result<()> {
        match pair.source {
            Source::Lrc => Err(Error::Memory("only HRC pairs can be appended".into())),
            Source::Hrc { ordinal, .. } if ordinal != self.fixations() + 1 => Err(Error::Memory(format!(
                "expected fixation ordinal {}, got {ordinal}",
                self.fixations() + 1
            ))),
            Source::Hrc { .. } => {
                self.pairs.push(pair);
                Ok(())
            }
        }
    }

    pub fn pairs(&self) -> &[TokenPair] {
        &self.pairs
    }

    pub fn fixations(&self) -> usize {
        self.pairs.len() - 1
    }

    /// Number of tokens, `2 + 2·fixations`.
    pub fn token_len(&self) -> usize {
        2 * self.pairs.len()
    }

    pub fn regions(&self) -> Vec<usize> {
        self.pairs.iter().filter_map(TokenPair::region).collect()
    }
}

/// Patch embedding + positional table + readout queries + encoder.
#[derive(Clone, Debug)]
pub struct Channel {
    pub embed: Linear,
    pub positions: PositionalTable,
    /// Two query tokens, row 0 producing the cls token, row 1 the rec token.
    pub readout: ParamId,
    pub encoder: EncoderStack,
    pub tokens: usize,
    pub patch_pixels: usize,
}

impl Channel {
    fn new(
        store: &mut ParamStore,
        name: &str,
        tokens: usize,
        patch_pixels: usize,
        geometry: &Geometry,
        arch: &Architecture,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let dim = geometry.embed_dim;
        Channel {
            embed: Linear::new(store, &format!("{name}.embed"), patch_pixels, dim, rng),
            positions: PositionalTable::new(store, &format!("{name}.pos"), tokens, dim, rng),
            readout: normal_table(store, &format!("{name}.readout"), 2, dim, TABLE_INIT_STD, rng),
            encoder: EncoderStack::new(store, &format!("{name}.enc"), arch.layers, arch.heads, dim, arch.ff_dim, rng),
            tokens,
            patch_pixels,
        }
    }

    /// Encodes `count` inputs given as `[count·tokens, patch_pixels]` patch
    /// rows; returns `[count·2, dim]` with the cls/rec pair of input `i`
    /// at rows `2i`, `2i+1`.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, patches: Var, count: usize) -> Result<Var> {
        let n = self.tokens;
        if tape.shape(patches) != [count * n, self.patch_pixels] {
            return Err(Error::InputShape {
                expected: format!("[{}, {}] patch", count * n, self.patch_pixels),
                got: tape.shape(patches).to_vec(),
            });
        }
        let emb = self.embed.forward(tape, p, patches)?;
        let positions: Vec<usize> = (0..count).flat_map(|_| 0..n).collect();
        let emb = self.positions.add(tape, p, emb, &positions)?;
        let all = tape.concat(&[emb, p[self.readout]])?;
        let seq = n + 2;
        let order: Vec<usize> = (0..count)
            .flat_map(|i| [count * n, count * n + 1].into_iter().chain(i * n..(i + 1) * n))
            .collect();
        let x = tape.gather_rows(all, &order)?;
        let y = self.encoder.forward(tape, p, x, count, seq)?;
        let picks: Vec<usize> = (0..count).flat_map(|i| [i * seq, i * seq + 1]).collect();
        Ok(tape.gather_rows(y, &picks)?)
    }
}

#[derive(Clone, Debug)]
pub struct TdfnModel {
    pub geometry: Geometry,
    pub arch: Architecture,
    pub store: ParamStore,
    pub lrc: Channel,
    pub hrc: Channel,
    pub he: EncoderStack,
    pub channels: ChannelTable,
    pub classifier: TwoLayer,
    pub reconstructor: TwoLayer,
    pub fpg: TwoLayer,
}

impl TdfnModel {
    pub fn new(geometry: Geometry, arch: Architecture, seed: u64) -> Result<Self> {
        geometry.validate()?;
        arch.validate(&geometry)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dim = geometry.embed_dim;
        let lrc = Channel::new(&mut store, "lrc", geometry.lrc_tokens(), geometry.lrc_patch_pixels(), &geometry, &arch, &mut rng);
        let hrc = Channel::new(&mut store, "hrc", geometry.hrc_tokens(), geometry.hrc_patch_pixels(), &geometry, &arch, &mut rng);
        let he = EncoderStack::new(&mut store, "he.enc", arch.layers, arch.heads, dim, arch.ff_dim, &mut rng);
        let channels = ChannelTable::new(&mut store, "he.channel", geometry.num_channels(), dim, &mut rng);
        let classifier = TwoLayer::new(
            &mut store,
            "classifier",
            (dim, arch.classifier_hidden, geometry.num_classes),
            Activation::Gelu,
            &mut rng,
        );
        let reconstructor = TwoLayer::new(
            &mut store,
            "reconstructor",
            (dim, arch.reconstructor_hidden, geometry.image_pixels()),
            Activation::Gelu,
            &mut rng,
        );
        let fpg = TwoLayer::new(
            &mut store,
            "fpg",
            (dim, arch.fpg_hidden, geometry.num_regions()),
            Activation::LeakyRelu,
            &mut rng,
        );
        Ok(TdfnModel {
            geometry,
            arch,
            store,
            lrc,
            hrc,
            he,
            channels,
            classifier,
            reconstructor,
            fpg,
        })
    }

    /// LRC pairs for `count` low-resolution images stored back to back.
    pub fn lrc_pairs<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, lowres: &[f32], count: usize) -> Result<Var> {
        let g = &self.geometry;
        let side = g.lowres_side;
        expect_len(lowres, count * side * side, "low-resolution batch")?;
        let patches: Vec<f32> = lowres
            .chunks(side * side)
            .flat_map(|img| patchify(img, side, g.lrc_patch))
            .collect();
        let patches = tape.constant(Tensor::new(&[count * g.lrc_tokens(), g.lrc_patch_pixels()], patches)?.cast());
        self.lrc.forward(tape, p, patches, count)
    }

    /// HRC pairs for `count` ROIs stored back to back. The region of an ROI
    /// does not enter here: HRC positions are relative to the ROI.
    pub fn hrc_pairs<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, rois: &[f32], count: usize) -> Result<Var> {
        let g = &self.geometry;
        let side = g.roi_side;
        expect_len(rois, count * side * side, "ROI batch")?;
        let patches: Vec<f32> = rois
            .chunks(side * side)
            .flat_map(|roi| patchify(roi, side, g.hrc_patch))
            .collect();
        let patches = tape.constant(Tensor::new(&[count * g.hrc_tokens(), g.hrc_patch_pixels()], patches)?.cast());
        self.hrc.forward(tape, p, patches, count)
    }

    /// Runs the hybrid encoder over `regions.len()` work memories that all
    /// hold `n` fixations.
    ///
    /// `lrc` is `[B·2, dim]`; `hrc` is `[B·n·2, dim]` with the pair of
    /// fixation `i` of sample `b` at rows `2(b·n+i)`, `2(b·n+i)+1`.
    /// Returns the cls and rec readouts, each `[B, dim]`.
    pub fn he_readouts<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        lrc: Var,
        hrc: Option<Var>,
        regions: &[Vec<usize>],
    ) -> Result<(Var, Var)> {
        let batch = regions.len();
        if batch == 0 {
            return Err(Error::Memory("empty work memory batch".into()));
        }
        let n = regions[0].len();
        if regions.iter().any(|r| r.len() != n) {
            return Err(Error::Memory("all memories in a batch need the same fixation count".into()));
        }
        let regions_total = self.geometry.num_regions();
        if let Some(&bad) = regions.iter().flatten().find(|&&r| r >= regions_total) {
            return Err(Error::Region {
                region: bad,
                regions: regions_total,
            });
        }
        let dim = self.geometry.embed_dim;
        if tape.shape(lrc) != [batch * 2, dim] {
            return Err(Error::InputShape {
                expected: format!("[{}, {dim}] LRC pair", batch * 2),
                got: tape.shape(lrc).to_vec(),
            });
        }
        let all = match (n, hrc) {
            (0, _) => lrc,
            (_, Some(h)) => {
                if tape.shape(h) != [batch * n * 2, dim] {
                    return Err(Error::InputShape {
                        expected: format!("[{}, {dim}] HRC pair", batch * n * 2),
                        got: tape.shape(h).to_vec(),
                    });
                }
                tape.concat(&[lrc, h])?
            }
            (_, None) => return Err(Error::Memory("fixation regions given without HRC pairs".into())),
        };
        let seq = 2 + 2 * n;
        let mut order = Vec::with_capacity(batch * seq);
        let mut channel_ids = Vec::with_capacity(batch * seq);
        for (b, regs) in regions.iter().enumerate() {
            order.extend([2 * b, 2 * b + 1]);
            channel_ids.extend([0, 0]);
            for (i, &r) in regs.iter().enumerate() {
                let row = 2 * batch + 2 * (b * n + i);
                order.extend([row, row + 1]);
                channel_ids.extend([1 + r, 1 + r]);
            }
        }
        let x = if n == 0 { lrc } else { tape.gather_rows(all, &order)? };
        let x = self.channels.add(tape, p, x, &channel_ids)?;
        let y = self.he.forward(tape, p, x, batch, seq)?;
        let cls = tape.gather_rows(y, &(0..batch).map(|b| b * seq).collect::<Vec<_>>())?;
        let rec = tape.gather_rows(y, &(0..batch).map(|b| b * seq + 1).collect::<Vec<_>>())?;
        Ok((cls, rec))
    }

    pub fn class_logits<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, cls: Var) -> Result<Var> {
        self.classifier.forward(tape, p, cls)
    }

    /// Raw (unclamped) reconstruction, `[B, image_pixels]`.
    pub fn reconstruction<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, rec: Var) -> Result<Var> {
        self.reconstructor.forward(tape, p, rec)
    }

    /// FPG logits over regions, `[B, regions]`.
    pub fn fpg_logits<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, rec: Var) -> Result<Var> {
        self.fpg.forward(tape, p, rec)
    }

    /// Binds every parameter as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        self.store.bind(tape, |_| false)
    }

    // --- single-sample API -------------------------------------------------

    pub fn lrc_forward(&self, lowres: &Tensor) -> Result<TokenPair> {
        let side = self.geometry.lowres_side;
        expect_shape(lowres, &[side, side], "low-resolution image")?;
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let pairs = self.lrc_pairs(&mut tape, &p, lowres.data(), 1)?;
        let (cls_token, rec_token) = split_pair(tape.value(pairs));
        Ok(TokenPair {
            cls_token,
            rec_token,
            source: Source::Lrc,
        })
    }

    pub fn hrc_forward(&self, roi: &Tensor, region: usize, ordinal: usize) -> Result<TokenPair> {
        let side = self.geometry.roi_side;
        expect_shape(roi, &[side, side], "ROI")?;
        self.check_region(region)?;
        if ordinal == 0 {
            return Err(Error::Memory("fixation ordinals start at 1".into()));
        }
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let pairs = self.hrc_pairs(&mut tape, &p, roi.data(), 1)?;
        let (cls_token, rec_token) = split_pair(tape.value(pairs));
        Ok(TokenPair {
            cls_token,
            rec_token,
            source: Source::Hrc { region, ordinal },
        })
    }

    /// HE cls and rec readouts for one work memory.
    pub fn he_forward(&self, memory: &WorkMemory) -> Result<(Tensor, Tensor)> {
        let dim = self.geometry.embed_dim;
        let rows = |pairs: &[TokenPair]| -> Vec<f32> {
            pairs
                .iter()
                .flat_map(|q| q.cls_token.data().iter().chain(q.rec_token.data()).copied())
                .collect()
        };
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let pairs = memory.pairs();
        let lrc = tape.constant(Tensor::new(&[2, dim], rows(&pairs[..1]))?);
        let hrc = if pairs.len() > 1 {
            Some(tape.constant(Tensor::new(&[2 * (pairs.len() - 1), dim], rows(&pairs[1..]))?))
        } else {
            None
        };
        let (cls, rec) = self.he_readouts(&mut tape, &p, lrc, hrc, &[memory.regions()])?;
        Ok((
            tape.value(cls).clone().reshape(&[dim])?,
            tape.value(rec).clone().reshape(&[dim])?,
        ))
    }

    /// Class probabilities from a cls readout.
    pub fn classify(&self, cls_readout: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let x = tape.constant(self.as_row(cls_readout)?);
        let logits = self.class_logits(&mut tape, &p, x)?;
        let probs = tape.softmax(logits, 1)?;
        Ok(tape.value(probs).clone().reshape(&[self.geometry.num_classes])?)
    }

    /// Raw reconstruction `[side, side]`; see [`clamp_unit`] for display.
    pub fn reconstruct(&self, rec_readout: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let x = tape.constant(self.as_row(rec_readout)?);
        let y = self.reconstruction(&mut tape, &p, x)?;
        let side = self.geometry.image_side;
        Ok(tape.value(y).clone().reshape(&[side, side])?)
    }

    pub fn fpg_saliency(&self, rec_readout: &Tensor) -> Result<SaliencyMap> {
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let x = tape.constant(self.as_row(rec_readout)?);
        let logits = self.fpg_logits(&mut tape, &p, x)?;
        let probs = tape.softmax(logits, 1)?;
        SaliencyMap::new(tape.data(probs).to_vec())
    }

    fn as_row(&self, token: &Tensor) -> Result<Tensor> {
        let dim = self.geometry.embed_dim;
        if token.numel() != dim {
            return Err(Error::InputShape {
                expected: format!("[{dim}] token"),
                got: token.shape().to_vec(),
            });
        }
        Ok(token.clone().reshape(&[1, dim])?)
    }

    pub fn check_region(&self, region: usize) -> Result<()> {
        let regions = self.geometry.num_regions();
        if region >= regions {
            return Err(Error::Region { region, regions });
        }
        Ok(())
    }
}

fn split_pair(pair: &Tensor) -> (Tensor, Tensor) {
    (Tensor::vector(pair.row(0).to_vec()), Tensor::vector(pair.row(1).to_vec()))
}

fn expect_len(data: &[f32], len: usize, what: &str) -> Result<()> {
    if data.len() != len {
        return Err(Error::InputShape {
            expected: format!("{len}-value {what}"),
            got: vec![data.len()],
        });
    }
    Ok(())
}

fn expect_shape(t: &Tensor, shape: &[usize], what: &str) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::InputShape {
            expected: format!("{shape:?} {what}"),
            got: t.shape().to_vec(),
        });
    }
    Ok(())
}

/// Splits a square image into row-major `patch × patch` blocks, each
/// flattened row-major.
pub fn patchify(image: &[f32], side: usize, patch: usize) -> Vec<f32> {
    let per_side = side / patch;
    let mut out = Vec::with_capacity(image.len());
    for pr in 0..per_side {
        for pc in 0..per_side {
            for r in 0..patch {
                let start = (pr * patch + r) * side + pc * patch;
                out.extend_from_slice(&image[start..start + patch]);
            }
        }
    }
    out
}

/// Average-pools a full-resolution image down to the low-resolution grid.
pub fn pool_lowres(geometry: &Geometry, image: &[f32]) -> Vec<f32> {
    let side = geometry.image_side;
    let f = geometry.pool_factor();
    let lo = geometry.lowres_side;
    let mut out = vec![0.0f32; lo * lo];
    for (cell, o) in out.iter_mut().enumerate() {
        let (cr, cc) = (cell / lo, cell % lo);
        let mut total = 0.0f64;
        for r in 0..f {
            let row = &image[(cr * f + r) * side + cc * f..][..f];
            total += row.iter().map(|&x| x as f64).sum::<f64>();
        }
        *o = (total / (f * f) as f64) as f32;
    }
    out
}

/// Copies the ROI of `region` (row-major over the region grid) out of a
/// full-resolution image.
pub fn crop_region(geometry: &Geometry, image: &[f32], region: usize) -> Vec<f32> {
    let side = geometry.image_side;
    let roi = geometry.roi_side;
    let (gr, gc) = (region / geometry.region_grid, region % geometry.region_grid);
    let mut out = Vec::with_capacity(roi * roi);
    for r in 0..roi {
        let start = (gr * roi + r) * side + gc * roi;
        out.extend_from_slice(&image[start..start + roi]);
    }
    out
}

/// 8×-downscaled view of a `[side, side]` image.
pub fn preprocess_lowres(geometry: &Geometry, image: &Tensor) -> Result<Tensor> {
    let side = geometry.image_side;
    expect_shape(image, &[side, side], "image")?;
    let lo = geometry.lowres_side;
    Ok(Tensor::new(&[lo, lo], pool_lowres(geometry, image.data()))?)
}

pub fn crop_roi(geometry: &Geometry, image: &Tensor, region: usize) -> Result<Tensor> {
    let side = geometry.image_side;
    expect_shape(image, &[side, side], "image")?;
    if region >= geometry.num_regions() {
        return Err(Error::Region {
            region,
            regions: geometry.num_regions(),
        });
    }
    let roi = geometry.roi_side;
    Ok(Tensor::new(&[roi, roi], crop_region(geometry, image.data(), region))?)
}

/// Clamps a raw reconstruction into `[0, 1]` for display.
pub fn clamp_unit(image: &Tensor) -> Tensor {
    image.map(|x| x.clamp(0.0, 1.0))
}
