//! Binary portable graymap/pixmap output and transfer-grid layout.

use anyhow::{bail, ensure, Result};
use dlab_core::diagnostics::TransferModel;
use dlab_core::Tensor;

/// Separator byte between grid cells.
pub const SEPARATOR: u8 = 128;

/// Interleaved 8-bit image with 1 (P5) or 3 (P6) channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

/// `round(value·255)` clamped to `[0, 255]`; NaN maps to 0.
pub fn to_byte(value: f64) -> u8 {
    if value.is_nan() {
        return 0;
    }
    (value.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Image {
    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Self { width, height, channels, pixels: vec![value; width * height * channels] }
    }

    pub fn get(&self, x: usize, y: usize, ch: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + ch]
    }

    /// Copies a `[C, H, W]` (or `[1, C, H, W]`) tensor with values in
    /// `[0, 1]` to the block whose top-left corner is `(x0, y0)`.
    pub fn blit(&mut self, t: &Tensor, x0: usize, y0: usize) -> Result<()> {
        let shape = t.shape();
        let (c, h, w) = match shape {
            [c, h, w] | [1, c, h, w] => (*c, *h, *w),
            _ => bail!("cannot blit tensor of shape {shape:?}"),
        };
        ensure!(c == self.channels, "tensor has {c} channels, image has {}", self.channels);
        ensure!(x0 + w <= self.width && y0 + h <= self.height, "block out of bounds");
        let d = t.data();
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    self.pixels[((y0 + y) * self.width + x0 + x) * c + ch] = to_byte(d[(ch * h + y) * w + x]);
                }
            }
        }
        Ok(())
    }

    /// P5 for one channel, P6 for three.
    pub fn to_pnm(&self) -> Result<Vec<u8>> {
        let magic = match self.channels {
            1 => "P5",
            3 => "P6",
            c => bail!("no portable format for {c} channels"),
        };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        Ok(out)
    }
}

/// Lays out `(rows + 1) × (cols + 1)` cells separated by 1-pixel mid-gray
/// lines. The top row holds the `c` sources, the left column the `v`
/// sources, cell `(i, j)` the transfer `Dec(N_v(v_src[i]), N_c(c_src[j]))`,
/// and the corner stays blank.
pub fn transfer_grid(model: &dyn TransferModel, v_src: &[Tensor], c_src: &[Tensor]) -> Result<Image> {
    ensure!(!v_src.is_empty() && !c_src.is_empty(), "grid needs at least one row and one column");
    let shape = v_src[0].shape().to_vec();
    ensure!(shape.len() == 3, "source images must be [C, H, W], got {shape:?}");
    ensure!(v_src.iter().chain(c_src).all(|t| t.shape() == shape.as_slice()), "source images differ in shape");
    let (ch, h, w) = (shape[0], shape[1], shape[2]);
    let (rows, cols) = (v_src.len(), c_src.len());
    let mut img = Image::filled((cols + 1) * w + cols, (rows + 1) * h + rows, ch, SEPARATOR);
    let cell = |i: usize, j: usize| (j * (w + 1), i * (h + 1));

    let (x, y) = cell(0, 0);
    img.blit(&Tensor::zeros(&shape), x, y)?;
    for (j, t) in c_src.iter().enumerate() {
        let (x, y) = cell(0, j + 1);
        img.blit(t, x, y)?;
    }
    for (i, t) in v_src.iter().enumerate() {
        let (x, y) = cell(i + 1, 0);
        img.blit(t, x, y)?;
        let lefts = vec![t.clone(); cols];
        for (j, out) in model.transfer(&lefts, c_src)?.iter().enumerate() {
            let (x, y) = cell(i + 1, j + 1);
            img.blit(out, x, y)?;
        }
    }
    Ok(img)
}
