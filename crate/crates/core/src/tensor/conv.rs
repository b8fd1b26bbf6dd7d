use super::ops::gemm;
use super::{shape_err, Tensor};
use crate::error::{contract, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec { stride: 1, pad: 0 }
    }
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (k, p) = (self.k, self.cols());
        let mut cols = vec![0.0; self.rows() * p];
        for c in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[oy * self.ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let (k, p) = (self.k, self.cols());
        let mut x = vec![0.0; self.cin * self.h * self.w];
        for c in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (c * self.h + iy as usize) * self.w;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                x[base + ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

impl Tensor {
    /// 2-D cross-correlation of a `[Cin, H, W]` input with a
    /// `[Cout, Cin, k, k]` kernel and optional `[Cout]` bias.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, spec: Conv2dSpec) -> Result<Tensor> {
        let &[cin, h, w] = self.shape() else {
            return Err(shape_err("conv2d", self, weight));
        };
        let &[cout, wcin, k, k2] = weight.shape() else {
            return Err(shape_err("conv2d", self, weight));
        };
        if wcin != cin || k != k2 {
            return Err(shape_err("conv2d", self, weight));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(shape_err("conv2d bias", weight, b));
            }
        }
        if spec.stride == 0 {
            return Err(contract("conv2d stride must be positive"));
        }
        if h + 2 * spec.pad < k || w + 2 * spec.pad < k {
            return Err(contract(format!(
                "conv2d: kernel {k} larger than padded input {:?}",
                self.shape()
            )));
        }
        let geo = Geometry {
            cin,
            h,
            w,
            k,
            stride: spec.stride,
            pad: spec.pad,
            oh: (h + 2 * spec.pad - k) / spec.stride + 1,
            ow: (w + 2 * spec.pad - k) / spec.stride + 1,
        };
        let (rows, p) = (geo.rows(), geo.cols());
        let cols = geo.im2col(self.data());
        let mut out = vec![0.0; cout * p];
        if let Some(b) = bias {
            for (o, &bv) in b.data().iter().enumerate() {
                out[o * p..(o + 1) * p].fill(bv);
            }
        }
        gemm(cout, rows, p, weight.data(), false, &cols, false, 1.0, &mut out);

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let shape = vec![cout, geo.oh, geo.ow];
        Ok(Tensor::from_op(
            out,
            shape,
            parents,
            Box::new(move |g, p_in, _| {
                let gx = p_in[0].requires_grad().then(|| {
                    let mut gcols = vec![0.0; rows * p];
                    gemm(rows, cout, p, p_in[1].data(), true, g, false, 0.0, &mut gcols);
                    geo.col2im(&gcols)
                });
                let gw = p_in[1].requires_grad().then(|| {
                    let mut gw = vec![0.0; cout * rows];
                    gemm(cout, p, rows, g, false, &cols, true, 0.0, &mut gw);
                    gw
                });
                let mut grads = vec![gx, gw];
                if p_in.len() == 3 {
                    grads.push(p_in[2].requires_grad().then(|| {
                        (0..cout).map(|o| g[o * p..(o + 1) * p].iter().sum()).collect()
                    }));
                }
                grads
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop reference.
    fn naive_conv(x: &[f64], cin: usize, h: usize, w: usize, k: &[f64], cout: usize, ks: usize, stride: usize, pad: usize) -> Vec<f64> {
        let oh = (h + 2 * pad - ks) / stride + 1;
        let ow = (w + 2 * pad - ks) / stride + 1;
        let mut out = vec![0.0; cout * oh * ow];
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for ky in 0..ks {
                            for kx in 0..ks {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x[(c * h + iy as usize) * w + ix as usize]
                                        * k[((o * cin + c) * ks + ky) * ks + kx];
                                }
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn impulse_response_reproduces_kernel() {
        let mut img = vec![0.0; 25];
        img[2 * 5 + 2] = 1.0;
        let x = Tensor::new(img, &[1, 5, 5]).unwrap();
        let kern: Vec<f64> = (1..=9).map(f64::from).collect();
        let k = Tensor::new(kern.clone(), &[1, 1, 3, 3]).unwrap();
        let y = x.conv2d(&k, None, Conv2dSpec { stride: 1, pad: 1 }).unwrap();
        // Cross-correlation flips the kernel around the impulse.
        for dy in 0..3 {
            for dx in 0..3 {
                let v = y.data()[(1 + dy) * 5 + (1 + dx)];
                assert_eq!(v, kern[(2 - dy) * 3 + (2 - dx)]);
            }
        }
    }

    #[test]
    fn matches_naive_reference_with_stride_and_pad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
            let (cin, h, w, cout, ks) = (2, 7, 6, 3, 3);
            let x: Vec<f64> = (0..cin * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..cout * cin * ks * ks).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y = Tensor::new(x.clone(), &[cin, h, w])
                .unwrap()
                .conv2d(&Tensor::new(k.clone(), &[cout, cin, ks, ks]).unwrap(), None, Conv2dSpec { stride, pad })
                .unwrap();
            let r = naive_conv(&x, cin, h, w, &k, cout, ks, stride, pad);
            for (a, b) in y.data().iter().zip(&r) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_wrt_input_kernel_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0: Vec<f64> = (0..2 * 5 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k0: Vec<f64> = (0..3 * 2 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b0 = vec![0.1, -0.2, 0.3];
        let spec = Conv2dSpec { stride: 2, pad: 1 };
        let kc = Tensor::new(k0.clone(), &[3, 2, 3, 3]).unwrap();
        let bc = Tensor::new(b0.clone(), &[3]).unwrap();
        let xc = Tensor::new(x0.clone(), &[2, 5, 5]).unwrap();
        let r = grad_check(|x| Ok(x.conv2d(&kc, Some(&bc), spec)?.square().sum()), &x0, &[2, 5, 5], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        let r = grad_check(|k| Ok(xc.conv2d(k, Some(&bc), spec)?.square().sum()), &k0, &[3, 2, 3, 3], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        let r = grad_check(|b| Ok(xc.conv2d(&kc, Some(b), spec)?.square().sum()), &b0, &[3], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn channel_mismatch_is_error() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(x.conv2d(&k, None, Conv2dSpec::default()).is_err());
    }
}
