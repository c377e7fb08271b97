use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Single-channel image with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::InvalidInput(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn blank(height: usize, width: usize) -> Self {
        Self { height, width, pixels: vec![0.0; height * width] }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.pixels[row * self.width + col] = v;
    }
}

/// Image geometry and patch size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch: usize) -> Result<Self> {
        if patch == 0 || height == 0 || width == 0 || height % patch != 0 || width % patch != 0 {
            return Err(Error::InvalidInput(format!("{height}x{width} image is not divisible into {patch}px patches")));
        }
        Ok(Self { height, width, patch })
    }

    pub fn patch_count(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch
    }

    /// `[N, p·p]` matrix of patches in row-major patch order.
    pub fn patchify(&self, image: &Image) -> Result<Tensor> {
        if image.height != self.height || image.width != self.width {
            return Err(Error::InvalidInput(format!(
                "expected {}x{} image, got {}x{}",
                self.height, self.width, image.height, image.width
            )));
        }
        let p = self.patch;
        let cols = self.width / p;
        let mut data = Vec::with_capacity(image.pixels.len());
        for n in 0..self.patch_count() {
            let (pr, pc) = (n / cols, n % cols);
            for r in 0..p {
                let start = (pr * p + r) * self.width + pc * p;
                data.extend_from_slice(&image.pixels[start..start + p]);
            }
        }
        Tensor::new(vec![self.patch_count(), self.patch_dim()], data)
    }

    pub fn unpatchify(&self, patches: &Tensor) -> Result<Image> {
        if patches.shape() != [self.patch_count(), self.patch_dim()] {
            return Err(Error::shape("unpatchify", patches.shape(), &[self.patch_count(), self.patch_dim()]));
        }
        let p = self.patch;
        let cols = self.width / p;
        let mut img = Image::blank(self.height, self.width);
        for (n, row) in patches.data().chunks(self.patch_dim()).enumerate() {
            let (pr, pc) = (n / cols, n % cols);
            for r in 0..p {
                let start = (pr * p + r) * self.width + pc * p;
                img.pixels[start..start + p].copy_from_slice(&row[r * p..(r + 1) * p]);
            }
        }
        Ok(img)
    }
}
