//! The recording tape for reverse-mode differentiation.
//!
//! Operations append nodes holding the forward value plus whatever the
//! backward pass needs; [`Tape::backward`] replays the records in reverse,
//! visiting each exactly once and accumulating gradients additively, so a
//! value used twice receives both contributions.

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::wavelet::Band;

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// The four Haar sub-bands of a tape value.
#[derive(Debug, Clone, Copy)]
pub struct BandVars {
    pub ll: Var,
    pub lh: Var,
    pub hl: Var,
    pub hh: Var,
}

impl BandVars {
    pub fn get(&self, band: Band) -> Var {
        match band {
            Band::Ll => self.ll,
            Band::Lh => self.lh,
            Band::Hl => self.hl,
            Band::Hh => self.hh,
        }
    }

    pub fn set(&mut self, band: Band, v: Var) {
        match band {
            Band::Ll => self.ll = v,
            Band::Lh => self.lh = v,
            Band::Hl => self.hl = v,
            Band::Hh => self.hh = v,
        }
    }
}

enum Op {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Relu {
        x: usize,
    },
    Tanh {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: Scalar,
    },
    Sum {
        x: usize,
    },
    GlobalAvgPool {
        x: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<Scalar>,
    },
    L1Loss {
        pred: usize,
        target: usize,
    },
    Down2 {
        x: usize,
    },
    Up2 {
        x: usize,
    },
    /// Additive noise is a constant for differentiation purposes.
    GaussianNoise {
        x: usize,
    },
    Clamp01 {
        x: usize,
    },
    DwtBand {
        x: usize,
        band: Band,
    },
    Idwt2 {
        ll: usize,
        lh: usize,
        hl: usize,
        hh: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<Scalar>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<Scalar>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<Scalar>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        self.grads.push(Vec::new());
        Var(self.nodes.len() - 1)
    }

    /// Put a tensor on the tape; its `requires_grad` flag is honored.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// A non-differentiable constant leaf.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    pub fn zeros_like(&mut self, v: Var) -> Var {
        let shape = self.nodes[v.0].shape.clone();
        let len = self.nodes[v.0].data.len();
        self.push(shape, vec![0.0; len], false, Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[Scalar] {
        &self.nodes[v.0].data
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("tape node is well-formed")
    }

    /// Gradient of the last `backward` w.r.t. `v`, if `v` required one.
    pub fn grad(&self, v: Var) -> Option<&[Scalar]> {
        let g = &self.grads[v.0];
        if g.is_empty() {
            None
        } else {
            Some(g)
        }
    }

    pub fn grad_tensor(&self, v: Var) -> Result<Tensor> {
        let g = self
            .grad(v)
            .ok_or_else(|| Error::invalid("Tape::grad", "no gradient recorded for this var"))?;
        Tensor::new(self.nodes[v.0].shape.clone(), g.to_vec())
    }

    fn dims4(&self, v: Var, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 4 {
            return Err(Error::shape(op, format!("expected 4-d tensor, got {:?}", s)));
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    // ---- differentiable operations -------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, h, wid) = self.dims4(x, "conv2d")?;
        let (cout, wcin, kh, kw) = self.dims4(w, "conv2d")?;
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {} vs filter channels {}", cin, wcin),
            ));
        }
        if self.nodes[b.0].shape != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?}, expected [{}]", self.nodes[b.0].shape, cout),
            ));
        }
        let (oh, ow) = kernels::conv2d_output_dims(h, wid, kh, kw, stride, pad)?;
        let mut out = vec![0.0; n * cout * oh * ow];
        kernels::conv2d_forward(
            &self.nodes[x.0].data,
            n,
            cin,
            h,
            wid,
            &self.nodes[w.0].data,
            cout,
            kh,
            kw,
            &self.nodes[b.0].data,
            stride,
            pad,
            oh,
            ow,
            &mut out,
        );
        let req = self.requires(&[x, w, b]);
        Ok(self.push(
            vec![n, cout, oh, ow],
            out,
            req,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                pad,
            },
        ))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = &self.nodes[x.0].shape;
        let ws = &self.nodes[w.0].shape;
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(
                "linear",
                format!("input {:?} vs weight {:?}", xs, ws),
            ));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        if self.nodes[b.0].shape != [dout] {
            return Err(Error::shape(
                "linear",
                format!("bias shape {:?}, expected [{}]", self.nodes[b.0].shape, dout),
            ));
        }
        let mut out = vec![0.0; n * dout];
        kernels::linear_forward(
            &self.nodes[x.0].data,
            n,
            din,
            &self.nodes[w.0].data,
            dout,
            &self.nodes[b.0].data,
            &mut out,
        );
        let req = self.requires(&[x, w, b]);
        Ok(self.push(
            vec![n, dout],
            out,
            req,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.0,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<Scalar> = self.nodes[x.0].data.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let req = self.nodes[x.0].requires_grad;
        self.push(shape, data, req, Op::Relu { x: x.0 })
    }

    /// Elementwise tanh, nudged strictly inside (-1, 1) even where the
    /// float rounds to exactly one.
    pub fn tanh(&mut self, x: Var) -> Var {
        let lim = 1.0 - Scalar::EPSILON;
        let data: Vec<Scalar> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| v.tanh().clamp(-lim, lim))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let req = self.nodes[x.0].requires_grad;
        self.push(shape, data, req, Op::Tanh { x: x.0 })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair(a, b, "add")?;
        let data: Vec<Scalar> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let req = self.requires(&[a, b]);
        Ok(self.push(shape, data, req, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair(a, b, "sub")?;
        let data: Vec<Scalar> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let req = self.requires(&[a, b]);
        Ok(self.push(shape, data, req, Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair(a, b, "mul")?;
        let data: Vec<Scalar> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let req = self.requires(&[a, b]);
        Ok(self.push(shape, data, req, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, x: Var, c: Scalar) -> Var {
        let data: Vec<Scalar> = self.nodes[x.0].data.iter().map(|&v| c * v).collect();
        let shape = self.nodes[x.0].shape.clone();
        let req = self.nodes[x.0].requires_grad;
        self.push(shape, data, req, Op::Scale { x: x.0, c })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: Scalar = self.nodes[x.0].data.iter().sum();
        let req = self.nodes[x.0].requires_grad;
        self.push(vec![1], vec![total], req, Op::Sum { x: x.0 })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x, "global_avg_pool")?;
        let mut out = vec![0.0; n * c];
        kernels::global_avg_pool_forward(&self.nodes[x.0].data, h * w, &mut out);
        let req = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![n, c], out, req, Op::GlobalAvgPool { x: x.0 }))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, computed with
    /// the log-sum-exp max shift.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = &self.nodes[logits.0].shape;
        if s.len() != 2 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("expected [N, K] logits, got {:?}", s),
            ));
        }
        let (n, k) = (s[0], s[1]);
        if labels.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for batch of {}", labels.len(), n),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!("label {} out of range for {} classes", bad, k),
            ));
        }
        let data = &self.nodes[logits.0].data;
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &data[i * k..(i + 1) * k];
            let m = row.iter().fold(Scalar::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                probs[i * k + j] = e;
                z += e;
            }
            for p in probs[i * k..(i + 1) * k].iter_mut() {
                *p /= z;
            }
            loss += z.ln() - (row[labels[i]] - m);
        }
        loss /= n as Scalar;
        let req = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            vec![1],
            vec![loss],
            req,
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean absolute error; subgradient 0 at exact ties.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.elementwise_pair(pred, target, "l1_loss")?;
        let loss: Scalar = self.nodes[pred.0]
            .data
            .iter()
            .zip(&self.nodes[target.0].data)
            .map(|(p, t)| (p - t).abs())
            .sum::<Scalar>()
            / self.nodes[pred.0].data.len() as Scalar;
        let req = self.requires(&[pred, target]);
        Ok(self.push(
            vec![1],
            vec![loss],
            req,
            Op::L1Loss {
                pred: pred.0,
                target: target.0,
            },
        ))
    }

    /// Stride-2 2x2 average pooling; requires even spatial dims.
    pub fn down2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x, "down2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(
                "down2",
                format!("spatial dims {}x{} must be even", h, w),
            ));
        }
        let mut out = vec![0.0; n * c * (h / 2) * (w / 2)];
        kernels::down2_forward(&self.nodes[x.0].data, n * c, h, w, &mut out);
        let req = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![n, c, h / 2, w / 2], out, req, Op::Down2 { x: x.0 }))
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn up2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x, "up2")?;
        let mut out = vec![0.0; n * c * 4 * h * w];
        kernels::up2_forward(&self.nodes[x.0].data, n * c, h, w, &mut out);
        let req = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![n, c, 2 * h, 2 * w], out, req, Op::Up2 { x: x.0 }))
    }

    /// Add seeded N(0, sigma^2) noise; the gradient passes through
    /// untouched. `sigma == 0` copies the input bit-exactly.
    pub fn gaussian_noise(&mut self, x: Var, sigma: Scalar, seed: u64) -> Result<Var> {
        if sigma < 0.0 {
            return Err(Error::invalid("gaussian_noise", "negative sigma"));
        }
        let mut data = self.nodes[x.0].data.clone();
        if sigma > 0.0 {
            let mut noise = vec![0.0; data.len()];
            rng::fill_gaussian(seed, sigma, &mut noise);
            for (d, n) in data.iter_mut().zip(&noise) {
                *d += n;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let req = self.nodes[x.0].requires_grad;
        Ok(self.push(shape, data, req, Op::GaussianNoise { x: x.0 }))
    }

    /// Clamp into [0, 1]; subgradient 1 inside the box (inclusive), 0 outside.
    pub fn clamp01(&mut self, x: Var) -> Var {
        let data: Vec<Scalar> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| v.clamp(0.0, 1.0))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let req = self.nodes[x.0].requires_grad;
        self.push(shape, data, req, Op::Clamp01 { x: x.0 })
    }

    pub fn dwt_band(&mut self, x: Var, band: Band) -> Result<Var> {
        let s = self.nodes[x.0].shape.clone();
        let ndim = s.len();
        if ndim < 2 {
            return Err(Error::shape("dwt2", format!("need spatial dims, got {:?}", s)));
        }
        let (h, w) = (s[ndim - 2], s[ndim - 1]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(
                "dwt2",
                format!("spatial dims {}x{} must be even", h, w),
            ));
        }
        let nc: usize = s[..ndim - 2].iter().product();
        let mut out = vec![0.0; nc * (h / 2) * (w / 2)];
        kernels::dwt_band_forward(&self.nodes[x.0].data, nc, h, w, band, &mut out);
        let mut oshape = s;
        oshape[ndim - 2] = h / 2;
        oshape[ndim - 1] = w / 2;
        let req = self.nodes[x.0].requires_grad;
        Ok(self.push(oshape, out, req, Op::DwtBand { x: x.0, band }))
    }

    /// Single-level Haar analysis into four sub-bands.
    pub fn dwt2(&mut self, x: Var) -> Result<BandVars> {
        Ok(BandVars {
            ll: self.dwt_band(x, Band::Ll)?,
            lh: self.dwt_band(x, Band::Lh)?,
            hl: self.dwt_band(x, Band::Hl)?,
            hh: self.dwt_band(x, Band::Hh)?,
        })
    }

    /// Haar synthesis; exact inverse of [`Tape::dwt2`].
    pub fn idwt2(&mut self, bands: BandVars) -> Result<Var> {
        let s = self.nodes[bands.ll.0].shape.clone();
        for v in [bands.lh, bands.hl, bands.hh] {
            if self.nodes[v.0].shape != s {
                return Err(Error::shape(
                    "idwt2",
                    format!("band shape {:?} vs {:?}", self.nodes[v.0].shape, s),
                ));
            }
        }
        let ndim = s.len();
        if ndim < 2 {
            return Err(Error::shape("idwt2", format!("need spatial dims, got {:?}", s)));
        }
        let (bh, bw) = (s[ndim - 2], s[ndim - 1]);
        let nc: usize = s[..ndim - 2].iter().product();
        let mut out = vec![0.0; nc * 4 * bh * bw];
        kernels::idwt2_forward(
            &self.nodes[bands.ll.0].data,
            &self.nodes[bands.lh.0].data,
            &self.nodes[bands.hl.0].data,
            &self.nodes[bands.hh.0].data,
            nc,
            bh,
            bw,
            &mut out,
        );
        let mut oshape = s;
        oshape[ndim - 2] = 2 * bh;
        oshape[ndim - 1] = 2 * bw;
        let req = self.requires(&[bands.ll, bands.lh, bands.hl, bands.hh]);
        Ok(self.push(
            oshape,
            out,
            req,
            Op::Idwt2 {
                ll: bands.ll.0,
                lh: bands.lh.0,
                hl: bands.hl.0,
                hh: bands.hh.0,
            },
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients of every
    /// `requires_grad` node reachable from `loss` become available through
    /// [`Tape::grad`]; repeated sweeps accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].shape),
            ));
        }
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if node.requires_grad && grad.is_empty() {
                grad.resize(node.data.len(), 0.0);
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0][0] += 1.0;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let gout = std::mem::take(&mut self.grads[i]);
            self.step_backward(i, &gout);
            self.grads[i] = gout;
        }
        Ok(())
    }

    fn requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn elementwise_pair(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            ));
        }
        Ok(())
    }

    fn wants(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    fn add_into(&mut self, idx: usize, f: impl FnOnce(&[Scalar], &mut [Scalar])) {
        if !self.wants(idx) {
            return;
        }
        let mut g = std::mem::take(&mut self.grads[idx]);
        f(&self.nodes[idx].data, &mut g);
        self.grads[idx] = g;
    }

    #[allow(clippy::too_many_lines)]
    fn step_backward(&mut self, i: usize, gout: &[Scalar]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                let (n, cin, h, wid) = {
                    let s = &self.nodes[x].shape;
                    (s[0], s[1], s[2], s[3])
                };
                let (cout, kh, kw) = {
                    let s = &self.nodes[w].shape;
                    (s[0], s[2], s[3])
                };
                let (oh, ow) = {
                    let s = &self.nodes[i].shape;
                    (s[2], s[3])
                };
                if self.wants(x) {
                    let mut gx = std::mem::take(&mut self.grads[x]);
                    kernels::conv2d_backward_input(
                        gout,
                        n,
                        cin,
                        h,
                        wid,
                        &self.nodes[w].data,
                        cout,
                        kh,
                        kw,
                        stride,
                        pad,
                        oh,
                        ow,
                        &mut gx,
                    );
                    self.grads[x] = gx;
                }
                if self.wants(w) || self.wants(b) {
                    let mut gw = if self.wants(w) {
                        std::mem::take(&mut self.grads[w])
                    } else {
                        vec![0.0; self.nodes[w].data.len()]
                    };
                    let mut gb = if self.wants(b) {
                        std::mem::take(&mut self.grads[b])
                    } else {
                        vec![0.0; self.nodes[b].data.len()]
                    };
                    kernels::conv2d_backward_filter(
                        gout,
                        &self.nodes[x].data,
                        n,
                        cin,
                        h,
                        wid,
                        cout,
                        kh,
                        kw,
                        stride,
                        pad,
                        oh,
                        ow,
                        &mut gw,
                        &mut gb,
                    );
                    if self.wants(w) {
                        self.grads[w] = gw;
                    }
                    if self.wants(b) {
                        self.grads[b] = gb;
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let (n, din) = {
                    let s = &self.nodes[x].shape;
                    (s[0], s[1])
                };
                let dout = self.nodes[w].shape[0];
                let mut gx = if self.wants(x) {
                    std::mem::take(&mut self.grads[x])
                } else {
                    vec![0.0; self.nodes[x].data.len()]
                };
                let mut gw = if self.wants(w) {
                    std::mem::take(&mut self.grads[w])
                } else {
                    vec![0.0; self.nodes[w].data.len()]
                };
                let mut gb = if self.wants(b) {
                    std::mem::take(&mut self.grads[b])
                } else {
                    vec![0.0; self.nodes[b].data.len()]
                };
                kernels::linear_backward(
                    gout,
                    &self.nodes[x].data,
                    n,
                    din,
                    &self.nodes[w].data,
                    dout,
                    &mut gx,
                    &mut gw,
                    &mut gb,
                );
                if self.wants(x) {
                    self.grads[x] = gx;
                }
                if self.wants(w) {
                    self.grads[w] = gw;
                }
                if self.wants(b) {
                    self.grads[b] = gb;
                }
            }
            Op::Relu { x } => {
                let x = *x;
                self.add_into(x, |xd, gx| {
                    for ((g, &v), &go) in gx.iter_mut().zip(xd).zip(gout) {
                        if v > 0.0 {
                            *g += go;
                        }
                    }
                });
            }
            Op::Tanh { x } => {
                let x = *x;
                // 1 - y^2 uses the forward output saved on node i
                let y = std::mem::take(&mut self.nodes[i].data);
                self.add_into(x, |_, gx| {
                    for ((g, &yv), &go) in gx.iter_mut().zip(&y).zip(gout) {
                        *g += go * (1.0 - yv * yv);
                    }
                });
                self.nodes[i].data = y;
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.add_into(a, |_, ga| {
                    for (g, &go) in ga.iter_mut().zip(gout) {
                        *g += go;
                    }
                });
                self.add_into(b, |_, gb| {
                    for (g, &go) in gb.iter_mut().zip(gout) {
                        *g += go;
                    }
                });
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                self.add_into(a, |_, ga| {
                    for (g, &go) in ga.iter_mut().zip(gout) {
                        *g += go;
                    }
                });
                self.add_into(b, |_, gb| {
                    for (g, &go) in gb.iter_mut().zip(gout) {
                        *g -= go;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let bd = std::mem::take(&mut self.nodes[b].data);
                self.add_into(a, |_, ga| {
                    for ((g, &bv), &go) in ga.iter_mut().zip(&bd).zip(gout) {
                        *g += go * bv;
                    }
                });
                self.nodes[b].data = bd;
                let ad = std::mem::take(&mut self.nodes[a].data);
                self.add_into(b, |_, gb| {
                    for ((g, &av), &go) in gb.iter_mut().zip(&ad).zip(gout) {
                        *g += go * av;
                    }
                });
                self.nodes[a].data = ad;
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                self.add_into(x, |_, gx| {
                    for (g, &go) in gx.iter_mut().zip(gout) {
                        *g += c * go;
                    }
                });
            }
            Op::Sum { x } => {
                let x = *x;
                let go = gout[0];
                self.add_into(x, |_, gx| {
                    for g in gx.iter_mut() {
                        *g += go;
                    }
                });
            }
            Op::GlobalAvgPool { x } => {
                let x = *x;
                let hw = {
                    let s = &self.nodes[x].shape;
                    s[2] * s[3]
                };
                self.add_into(x, |_, gx| {
                    kernels::global_avg_pool_backward(gout, hw, gx);
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let x = *logits;
                let n = labels.len();
                let k = probs.len() / n;
                let go = gout[0] / n as Scalar;
                let labels = labels.clone();
                let probs = std::mem::take(match &mut self.nodes[i].op {
                    Op::SoftmaxCrossEntropy { probs, .. } => probs,
                    _ => unreachable!(),
                });
                self.add_into(x, |_, gx| {
                    for r in 0..n {
                        for j in 0..k {
                            let ind = if j == labels[r] { 1.0 } else { 0.0 };
                            gx[r * k + j] += go * (probs[r * k + j] - ind);
                        }
                    }
                });
                if let Op::SoftmaxCrossEntropy { probs: slot, .. } = &mut self.nodes[i].op {
                    *slot = probs;
                }
            }
            Op::L1Loss { pred, target } => {
                let (p, t) = (*pred, *target);
                let count = self.nodes[p].data.len() as Scalar;
                let go = gout[0] / count;
                let diffs: Vec<Scalar> = self.nodes[p]
                    .data
                    .iter()
                    .zip(&self.nodes[t].data)
                    .map(|(a, b)| match a.partial_cmp(b) {
                        Some(std::cmp::Ordering::Greater) => go,
                        Some(std::cmp::Ordering::Less) => -go,
                        _ => 0.0,
                    })
                    .collect();
                self.add_into(p, |_, gp| {
                    for (g, d) in gp.iter_mut().zip(&diffs) {
                        *g += d;
                    }
                });
                self.add_into(t, |_, gt| {
                    for (g, d) in gt.iter_mut().zip(&diffs) {
                        *g -= d;
                    }
                });
            }
            Op::Down2 { x } => {
                let x = *x;
                let (nc, h, w) = {
                    let s = &self.nodes[x].shape;
                    (s[0] * s[1], s[2], s[3])
                };
                self.add_into(x, |_, gx| {
                    kernels::down2_backward(gout, nc, h, w, gx);
                });
            }
            Op::Up2 { x } => {
                let x = *x;
                let (nc, h, w) = {
                    let s = &self.nodes[x].shape;
                    (s[0] * s[1], s[2], s[3])
                };
                self.add_into(x, |_, gx| {
                    kernels::up2_backward(gout, nc, h, w, gx);
                });
            }
            Op::GaussianNoise { x } => {
                let x = *x;
                self.add_into(x, |_, gx| {
                    for (g, &go) in gx.iter_mut().zip(gout) {
                        *g += go;
                    }
                });
            }
            Op::Clamp01 { x } => {
                let x = *x;
                self.add_into(x, |xd, gx| {
                    for ((g, &v), &go) in gx.iter_mut().zip(xd).zip(gout) {
                        if (0.0..=1.0).contains(&v) {
                            *g += go;
                        }
                    }
                });
            }
            Op::DwtBand { x, band } => {
                let (x, band) = (*x, *band);
                let s = &self.nodes[x].shape;
                let ndim = s.len();
                let (h, w) = (s[ndim - 2], s[ndim - 1]);
                let nc: usize = s[..ndim - 2].iter().product();
                self.add_into(x, |_, gx| {
                    kernels::dwt_band_backward(gout, nc, h, w, band, gx);
                });
            }
            Op::Idwt2 { ll, lh, hl, hh } => {
                let (ll, lh, hl, hh) = (*ll, *lh, *hl, *hh);
                let s = &self.nodes[ll].shape;
                let ndim = s.len();
                let (bh, bw) = (s[ndim - 2], s[ndim - 1]);
                let nc: usize = s[..ndim - 2].iter().product();
                let band_len = self.nodes[ll].data.len();
                // accumulate into temporaries, then route to each band's
                // grad; the same var may back more than one band
                let mut gll = vec![0.0; band_len];
                let mut glh = vec![0.0; band_len];
                let mut ghl = vec![0.0; band_len];
                let mut ghh = vec![0.0; band_len];
                kernels::idwt2_backward(gout, nc, bh, bw, &mut gll, &mut glh, &mut ghl, &mut ghh);
                for (idx, tmp) in [(ll, &gll), (lh, &glh), (hl, &ghl), (hh, &ghh)] {
                    self.add_into(idx, |_, g| {
                        for (gv, d) in g.iter_mut().zip(tmp) {
                            *gv += d;
                        }
                    });
                }
            }
        }
    }
}
