//! Image and network geometry.

use crate::error::{Error, Result};

/// Pixel layout of the two resolutions and the fixation grid.
///
/// Fixation regions are the cells of a `region_grid × region_grid` tiling of
/// the full-resolution image, so every region is exactly one ROI. The grid
/// resolution is not given directly by the source experiments; it is
/// inferred from the requirement that `n` fixations cover exactly `n/16` of
/// the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub image_side: usize,
    pub lowres_side: usize,
    pub lrc_patch: usize,
    pub roi_side: usize,
    pub hrc_patch: usize,
    pub region_grid: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            image_side: 32,
            lowres_side: 4,
            lrc_patch: 1,
            roi_side: 8,
            hrc_patch: 2,
            region_grid: 4,
            embed_dim: 32,
            num_classes: 10,
        }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Geometry(msg.to_string()));
        if [
            self.image_side,
            self.lowres_side,
            self.lrc_patch,
            self.roi_side,
            self.hrc_patch,
            self.region_grid,
            self.embed_dim,
            self.num_classes,
        ]
        .contains(&0)
        {
            return fail("all dimensions must be positive");
        }
        if self.image_side % self.lowres_side != 0 {
            return fail("low-res side must divide the image side");
        }
        if self.region_grid * self.roi_side != self.image_side {
            return fail("region grid must tile the image exactly");
        }
        if self.num_regions() > 64 {
            return fail("at most 64 fixation regions are supported");
        }
        if self.lowres_side % self.lrc_patch != 0 || self.roi_side % self.hrc_patch != 0 {
            return fail("patch size must divide its input side");
        }
        Ok(())
    }

    pub fn image_pixels(&self) -> usize {
        self.image_side * self.image_side
    }

    pub fn pool_factor(&self) -> usize {
        self.image_side / self.lowres_side
    }

    pub fn num_regions(&self) -> usize {
        self.region_grid * self.region_grid
    }

    pub fn lrc_tokens(&self) -> usize {
        let per_side = self.lowres_side / self.lrc_patch;
        per_side * per_side
    }

    pub fn hrc_tokens(&self) -> usize {
        let per_side = self.roi_side / self.hrc_patch;
        per_side * per_side
    }

    pub fn lrc_patch_pixels(&self) -> usize {
        self.lrc_patch * self.lrc_patch
    }

    pub fn hrc_patch_pixels(&self) -> usize {
        self.hrc_patch * self.hrc_patch
    }

    /// One LRC channel plus one channel per region.
    pub fn num_channels(&self) -> usize {
        1 + self.num_regions()
    }
}

/// Encoder and head sizes not fixed by [`Geometry`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub classifier_hidden: usize,
    pub reconstructor_hidden: usize,
    pub fpg_hidden: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            layers: 6,
            heads: 4,
            ff_dim: 128,
            classifier_hidden: 64,
            reconstructor_hidden: 256,
            fpg_hidden: 64,
        }
    }
}

impl Architecture {
    pub fn validate(&self, geometry: &Geometry) -> Result<()> {
        if self.heads == 0 || geometry.embed_dim % self.heads != 0 {
            return Err(Error::Geometry(format!(
                "{} heads do not divide embedding width {}",
                self.heads, geometry.embed_dim
            )));
        }
        if [
            self.ff_dim,
            self.classifier_hidden,
            self.reconstructor_hidden,
            self.fpg_hidden,
        ]
        .contains(&0)
        {
            return Err(Error::Geometry("hidden widths must be positive".into()));
        }
        Ok(())
    }
}
