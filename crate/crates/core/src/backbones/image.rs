//! Small convolutional pyramid: a 4×4/stride-4 stem followed by three
//! 3×3/stride-2 stages, 32× downsampling overall.

use std::sync::Arc;

use ndarray::{Array2, Array3};

use crate::autograd::{ParamId, ParamStore, Tape, Var, GATHER_ZERO};
use crate::error::{Error, Result};
use crate::nn::Init;

/// One strided convolution lowered to a gather (im2col) and a matmul.
#[derive(Clone, Debug)]
struct ConvStage {
    weight: ParamId,
    bias: ParamId,
    index: Arc<Vec<u32>>,
    cols: usize,
    relu: bool,
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    in_dim: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Flat indices mapping `[in × H·W]` to `[in·k·k × Ho·Wo]` patches.
    fn im2col(&self) -> Vec<u32> {
        let (ho, wo) = self.out_hw();
        let kk = self.k * self.k;
        let mut index = Vec::with_capacity(self.in_dim * kk * ho * wo);
        for c in 0..self.in_dim {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let y = (oy * self.stride + ky) as isize - self.pad as isize;
                            let x = (ox * self.stride + kx) as isize - self.pad as isize;
                            let inside = y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w;
                            index.push(if inside {
                                (c * self.h * self.w + y as usize * self.w + x as usize) as u32
                            } else {
                                GATHER_ZERO
                            });
                        }
                    }
                }
            }
        }
        index
    }
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    stages: Vec<ConvStage>,
    image_size: usize,
    channels: usize,
    grid: (usize, usize),
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, channels: usize, image_size: usize) -> Result<Self> {
        if image_size < 32 {
            return Err(Error::Config(format!("image size {image_size} is below 32")));
        }
        let q = (channels / 4).max(4);
        let h = (channels / 2).max(4);
        // (out channels, kernel, stride, pad)
        let plan = [(q, 4, 4, 0), (h, 3, 2, 1), (channels, 3, 2, 1), (channels, 3, 2, 1)];
        let mut stages = Vec::with_capacity(plan.len());
        let (mut in_dim, mut hh, mut ww) = (3, image_size, image_size);
        for (i, &(out, k, stride, pad)) in plan.iter().enumerate() {
            let g = Geometry {
                in_dim,
                h: hh,
                w: ww,
                k,
                stride,
                pad,
            };
            let (ho, wo) = g.out_hw();
            let fan_in = in_dim * k * k;
            stages.push(ConvStage {
                weight: store.add(format!("image.stage{i}.weight"), init.he(out, fan_in, fan_in)),
                bias: store.add(format!("image.stage{i}.bias"), Array2::zeros((out, 1))),
                index: Arc::new(g.im2col()),
                cols: ho * wo,
                relu: i + 1 < plan.len(),
            });
            (in_dim, hh, ww) = (out, ho, wo);
        }
        Ok(Self {
            stages,
            image_size,
            channels,
            grid: (hh, ww),
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Spatial size of the output grid; `N_i = rows × cols`.
    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    /// Channel-first pixels in `[0, 1]` → `F_i` of shape `[C × N_i]`.
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, pixels: &Array3<f64>) -> Result<Var> {
        let (c, h, w) = pixels.dim();
        if c != 3 {
            return Err(Error::Shape(format!("image has {c} channels, expected 3")));
        }
        if h != self.image_size || w != self.image_size {
            return Err(Error::Shape(format!(
                "image is {h}x{w}, encoder expects {0}x{0}",
                self.image_size
            )));
        }
        let flat = pixels
            .as_standard_layout()
            .into_shape_with_order((3, h * w))
            .expect("contiguous")
            .mapv(|v| v - 0.5);
        let mut x = tape.constant(flat);
        for stage in &self.stages {
            let rows = stage.index.len() / stage.cols;
            let patches = tape.gather(x, stage.index.as_ref().clone(), (rows, stage.cols));
            let wgt = tape.param(store, stage.weight);
            let b = tape.param(store, stage.bias);
            let y = tape.matmul(wgt, patches);
            x = tape.add_col(y, b);
            if stage.relu {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }

    /// Encodes several images independently, giving `[B × C × N_i]`.
    pub fn encode_batch(&self, store: &ParamStore, images: &[&Array3<f64>]) -> Result<Array3<f64>> {
        let n = self.grid.0 * self.grid.1;
        let mut out = Array3::zeros((images.len(), self.channels, n));
        for (b, px) in images.iter().enumerate() {
            let mut tape = Tape::new();
            let f = self.forward(&mut tape, store, px)?;
            out.index_axis_mut(ndarray::Axis(0), b).assign(tape.value(f));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoder(c: usize) -> (ImageEncoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut init = Init::new(3);
        let enc = ImageEncoder::new(&mut store, &mut init, c, 224).unwrap();
        (enc, store)
    }

    #[test]
    fn default_grid_is_seven_by_seven() {
        let (enc, store) = encoder(16);
        assert_eq!(enc.grid(), (7, 7));
        let mut tape = Tape::new();
        let f = enc.forward(&mut tape, &store, &Array3::zeros((3, 224, 224))).unwrap();
        assert_eq!(tape.shape(f), (16, 49));
        assert!(tape.value(f).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn wrong_channels_is_shape_error() {
        let (enc, store) = encoder(16);
        let mut tape = Tape::new();
        assert!(matches!(
            enc.forward(&mut tape, &store, &Array3::zeros((1, 224, 224))),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn batch_and_determinism() {
        let (enc, store) = encoder(16);
        let img = Array3::from_shape_fn((3, 224, 224), |(c, y, x)| ((c + y * 3 + x * 7) % 11) as f64 / 10.0);
        let imgs: Vec<&Array3<f64>> = std::iter::repeat_n(&img, 16).collect();
        let out = enc.encode_batch(&store, &imgs).unwrap();
        assert_eq!(out.dim(), (16, 16, 49));
        assert_eq!(out.index_axis(ndarray::Axis(0), 0), out.index_axis(ndarray::Axis(0), 15));
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        // 1 channel 5×5, k=3, s=2, p=1 against a hand-rolled loop.
        let g = Geometry {
            in_dim: 1,
            h: 5,
            w: 5,
            k: 3,
            stride: 2,
            pad: 1,
        };
        let img: Vec<f64> = (0..25).map(|i| i as f64).collect();
        let idx = g.im2col();
        let (ho, wo) = g.out_hw();
        assert_eq!((ho, wo), (3, 3));
        let kernel: Vec<f64> = (0..9).map(|i| (i as f64) * 0.1 - 0.3).collect();
        for oy in 0..ho {
            for ox in 0..wo {
                let mut direct = 0.0;
                let mut lowered = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let y = (oy * 2 + ky) as isize - 1;
                        let x = (ox * 2 + kx) as isize - 1;
                        if (0..5).contains(&y) && (0..5).contains(&x) {
                            direct += kernel[ky * 3 + kx] * img[(y * 5 + x) as usize];
                        }
                        let i = idx[(ky * 3 + kx) * ho * wo + oy * wo + ox];
                        if i != GATHER_ZERO {
                            lowered += kernel[ky * 3 + kx] * img[i as usize];
                        }
                    }
                }
                assert_eq!(direct, lowered);
            }
        }
    }
}
