//! Dense NCHW batches used by the network code.

use crate::patch::ImagePatch;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length");
        Tensor { n, c, h, w, data }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let len = self.sample_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.n == other.n && self.c == other.c && self.h == other.h && self.w == other.w
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }

    /// Stacks HWC patches into a channel-major batch.
    pub fn from_patches<'a, I>(patches: I) -> Self
    where
        I: IntoIterator<Item = &'a ImagePatch>,
    {
        let patches: Vec<&ImagePatch> = patches.into_iter().collect();
        assert!(!patches.is_empty(), "empty batch");
        let (h, w, c) = patches[0].shape();
        let mut out = Tensor::zeros(patches.len(), c, h, w);
        for (i, p) in patches.iter().enumerate() {
            assert_eq!(p.shape(), (h, w, c), "mixed patch geometry in batch");
            let dst = out.sample_mut(i);
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        dst[ch * h * w + y * w + x] = p.pixels()[(y * w + x) * c + ch];
                    }
                }
            }
        }
        out
    }

    /// Converts sample `i` back into an HWC patch. Values are clamped into [0,1].
    pub fn to_patch(&self, i: usize) -> ImagePatch {
        let (h, w, c) = (self.h, self.w, self.c);
        let src = self.sample(i);
        let mut pixels = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    pixels[(y * w + x) * c + ch] = src[ch * h * w + y * w + x].clamp(0.0, 1.0);
                }
            }
        }
        ImagePatch::new(h, w, c, pixels).expect("clamped pixels are valid")
    }
}
