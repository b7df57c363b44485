//! Reference implementations shared by the integration tests: direct-loop
//! operators on plain arrays, the toy network written out by hand, and a
//! central finite-difference gradient checker.
#![allow(dead_code)]

pub mod suites;

use hrmark::network::{ModelParams, ParamDecls};
use hrmark::{Graph, Mode, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| StandardNormal.sample(rng))
}

pub fn uniform(shape: [usize; 4], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
}

/// Plain NCHW array.
#[derive(Debug, Clone, PartialEq)]
pub struct Arr {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: Vec<f64>,
}

impl Arr {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Arr { n, c, h, w, d: vec![0.0; n * c * h * w] }
    }

    pub fn of(t: &Tensor<f64>) -> Self {
        let [n, c, h, w] = t.shape();
        Arr { n, c, h, w, d: t.data().to_vec() }
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.d[((n * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = ((n * self.c + c) * self.h + y) * self.w + x;
        self.d[i] = v;
    }

    pub fn max_abs_diff(&self, t: &Tensor<f64>) -> f64 {
        assert_eq!([self.n, self.c, self.h, self.w], t.shape(), "shape mismatch");
        self.d.iter().zip(t.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Direct grouped convolution, zero padding.
pub fn conv(x: &Arr, w: &Arr, b: Option<&[f64]>, stride: usize, pad: usize, groups: usize) -> Arr {
    let (kh, kw) = (w.h, w.w);
    let ho = (x.h + 2 * pad - kh) / stride + 1;
    let wo = (x.w + 2 * pad - kw) / stride + 1;
    let cin_g = x.c / groups;
    let cout_g = w.n / groups;
    let mut out = Arr::zeros(x.n, w.n, ho, wo);
    for n in 0..x.n {
        for o in 0..w.n {
            let g = o / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b[o]);
                    for ci in 0..cin_g {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                acc += w.get(o, ci, ky, kx)
                                    * x.get(n, g * cin_g + ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(n, o, oy, ox, acc);
                }
            }
        }
    }
    out
}

pub fn map(x: &Arr, f: impl Fn(f64) -> f64) -> Arr {
    Arr { d: x.d.iter().map(|&v| f(v)).collect(), ..x.clone() }
}

pub fn relu(x: &Arr) -> Arr {
    map(x, |v| v.max(0.0))
}

pub fn sigmoid(x: &Arr) -> Arr {
    map(x, |v| 1.0 / (1.0 + (-v).exp()))
}

pub fn bn(x: &Arr, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64]) -> Arr {
    let mut out = x.clone();
    for n in 0..x.n {
        for c in 0..x.c {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let v = (x.get(n, c, y, xx) - mean[c]) / (var[c] + 1e-5).sqrt();
                    out.set(n, c, y, xx, gamma[c] * v + beta[c]);
                }
            }
        }
    }
    out
}

pub fn channels(x: &Arr, start: usize, len: usize) -> Arr {
    let mut out = Arr::zeros(x.n, len, x.h, x.w);
    for n in 0..x.n {
        for c in 0..len {
            for y in 0..x.h {
                for xx in 0..x.w {
                    out.set(n, c, y, xx, x.get(n, start + c, y, xx));
                }
            }
        }
    }
    out
}

pub fn cat(parts: &[&Arr]) -> Arr {
    let c = parts.iter().map(|p| p.c).sum();
    let f = parts[0];
    let mut out = Arr::zeros(f.n, c, f.h, f.w);
    for n in 0..f.n {
        let mut base = 0;
        for p in parts {
            for ch in 0..p.c {
                for y in 0..p.h {
                    for xx in 0..p.w {
                        out.set(n, base + ch, y, xx, p.get(n, ch, y, xx));
                    }
                }
            }
            base += p.c;
        }
    }
    out
}

/// Output channel `k·g + j` takes input channel `j·(C/g) + k`.
pub fn shuffle(x: &Arr, g: usize) -> Arr {
    let per = x.c / g;
    let mut out = x.clone();
    for n in 0..x.n {
        for j in 0..g {
            for k in 0..per {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        out.set(n, k * g + j, y, xx, x.get(n, j * per + k, y, xx));
                    }
                }
            }
        }
    }
    out
}

pub fn avg_pool(x: &Arr, f: usize) -> Arr {
    let mut out = Arr::zeros(x.n, x.c, x.h / f, x.w / f);
    for n in 0..x.n {
        for c in 0..x.c {
            for y in 0..out.h {
                for xx in 0..out.w {
                    let mut s = 0.0;
                    for dy in 0..f {
                        for dx in 0..f {
                            s += x.get(n, c, y * f + dy, xx * f + dx);
                        }
                    }
                    out.set(n, c, y, xx, s / (f * f) as f64);
                }
            }
        }
    }
    out
}

pub fn nearest(x: &Arr, f: usize) -> Arr {
    let mut out = Arr::zeros(x.n, x.c, x.h * f, x.w * f);
    for n in 0..x.n {
        for c in 0..x.c {
            for y in 0..out.h {
                for xx in 0..out.w {
                    out.set(n, c, y, xx, x.get(n, c, y / f, xx / f));
                }
            }
        }
    }
    out
}

/// Half-pixel bilinear upsampling with edge clamping.
pub fn bilinear(x: &Arr, f: usize) -> Arr {
    let src = |o: usize, size: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) / f as f64 - 0.5).max(0.0).min((size - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(size - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Arr::zeros(x.n, x.c, x.h * f, x.w * f);
    for n in 0..x.n {
        for c in 0..x.c {
            for y in 0..out.h {
                let (y0, y1, ly) = src(y, x.h);
                for xx in 0..out.w {
                    let (x0, x1, lx) = src(xx, x.w);
                    let v = (1.0 - ly) * ((1.0 - lx) * x.get(n, c, y0, x0) + lx * x.get(n, c, y0, x1))
                        + ly * ((1.0 - lx) * x.get(n, c, y1, x0) + lx * x.get(n, c, y1, x1));
                    out.set(n, c, y, xx, v);
                }
            }
        }
    }
    out
}

pub fn gap(x: &Arr) -> Arr {
    let mut out = Arr::zeros(x.n, x.c, 1, 1);
    for n in 0..x.n {
        for c in 0..x.c {
            let mut s = 0.0;
            for y in 0..x.h {
                for xx in 0..x.w {
                    s += x.get(n, c, y, xx);
                }
            }
            out.set(n, c, 0, 0, s / (x.h * x.w) as f64);
        }
    }
    out
}

pub fn channel_mean(x: &Arr) -> Arr {
    let mut out = Arr::zeros(x.n, 1, x.h, x.w);
    for n in 0..x.n {
        for y in 0..x.h {
            for xx in 0..x.w {
                let s: f64 = (0..x.c).map(|c| x.get(n, c, y, xx)).sum();
                out.set(n, 0, y, xx, s / x.c as f64);
            }
        }
    }
    out
}

/// Elementwise op broadcasting size-1 channel or spatial axes of either side.
pub fn bcast(a: &Arr, b: &Arr, f: impl Fn(f64, f64) -> f64) -> Arr {
    let c = a.c.max(b.c);
    let h = a.h.max(b.h);
    let w = a.w.max(b.w);
    let pick = |t: &Arr, n, ch: usize, y: usize, x: usize| {
        t.get(n, if t.c == 1 { 0 } else { ch }, if t.h == 1 { 0 } else { y }, if t.w == 1 { 0 } else { x })
    };
    let mut out = Arr::zeros(a.n, c, h, w);
    for n in 0..a.n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.set(n, ch, y, x, f(pick(a, n, ch, y, x), pick(b, n, ch, y, x)));
                }
            }
        }
    }
    out
}

pub fn add(a: &Arr, b: &Arr) -> Arr {
    bcast(a, b, |x, y| x + y)
}

pub fn mul(a: &Arr, b: &Arr) -> Arr {
    bcast(a, b, |x, y| x * y)
}

/// Parameter lookup by full dotted name.
pub struct P<'a>(pub &'a ModelParams<f64>);

impl P<'_> {
    pub fn arr(&self, name: &str) -> Arr {
        Arr::of(self.0.get(name).unwrap_or_else(|| panic!("missing param {name}")))
    }

    pub fn vec(&self, name: &str) -> Vec<f64> {
        self.0.get(name).unwrap_or_else(|| panic!("missing param {name}")).data().to_vec()
    }

    pub fn buf(&self, name: &str) -> Vec<f64> {
        self.0.buffer(name).unwrap_or_else(|| panic!("missing buffer {name}")).data().to_vec()
    }

    /// conv (no bias) + inference batch norm + optional relu.
    pub fn conv_bn(&self, x: &Arr, name: &str, stride: usize, groups: usize, act: bool) -> Arr {
        let w = self.arr(&format!("{name}.weight"));
        let y = conv(x, &w, None, stride, w.h / 2, groups);
        let bn_ = |s: &str| format!("{name}.bn.{s}");
        let y = bn(&y, &self.vec(&bn_("gamma")), &self.vec(&bn_("beta")), &self.buf(&bn_("running_mean")), &self.buf(&bn_("running_var")));
        if act {
            relu(&y)
        } else {
            y
        }
    }

    pub fn conv_bias(&self, x: &Arr, name: &str) -> Arr {
        let w = self.arr(&format!("{name}.weight"));
        conv(x, &w, Some(&self.vec(&format!("{name}.bias"))), 1, w.h / 2, 1)
    }

    pub fn gate(&self, pooled: &Arr, scope: &str) -> Arr {
        let h = relu(&self.conv_bias(pooled, &format!("{scope}.fc1")));
        sigmoid(&self.conv_bias(&h, &format!("{scope}.fc2")))
    }
}

/// The toy preset (stem 8, widths [8, 16], one module of one ccw unit, SCAF
/// fusion, MR head) written out op by op, inference-mode batch norm.
pub fn toy_forward(p: &P, img: &Arr) -> Arr {
    // stem
    let x = p.conv_bn(img, "stem.conv1", 2, 1, true);
    let (a, b) = (channels(&x, 0, 4), channels(&x, 4, 4));
    let a = p.conv_bn(&a, "stem.branch_a.dw", 2, 4, false);
    let a = p.conv_bn(&a, "stem.branch_a.pw", 1, 1, true);
    let b = p.conv_bn(&b, "stem.branch_b.expand", 1, 1, true);
    let b = p.conv_bn(&b, "stem.branch_b.dw", 2, 4, false);
    let b = p.conv_bn(&b, "stem.branch_b.pw", 1, 1, true);
    let x0 = shuffle(&cat(&[&a, &b]), 2);

    // transition to a second branch at half resolution
    let t = p.conv_bn(&x0, "stage0.transition.dw", 2, 8, false);
    let x1 = p.conv_bn(&t, "stage0.transition.pw", 1, 1, true);

    // ccw unit
    let s = "stage0.module0.ccw0";
    let (a0, b0) = (channels(&x0, 0, 4), channels(&x0, 4, 4));
    let (a1, b1) = (channels(&x1, 0, 8), channels(&x1, 8, 8));
    let joint = cat(&[&avg_pool(&b0, 2), &b1]);
    let h = relu(&p.conv_bias(&joint, &format!("{s}.crw.conv1")));
    let wts = sigmoid(&p.conv_bias(&h, &format!("{s}.crw.conv2")));
    let b0 = mul(&b0, &nearest(&channels(&wts, 0, 4), 2));
    let b1 = mul(&b1, &channels(&wts, 4, 8));
    let mut ys = Vec::new();
    for (i, (a, b)) in [(a0, b0), (a1, b1)].into_iter().enumerate() {
        let pre = format!("{s}.b{i}");
        let c = b.c;
        let y = p.conv_bn(&b, &format!("{pre}.dw"), 1, c, false);
        let y = mul(&y, &p.gate(&gap(&y), &format!("{pre}.sw")));
        ys.push(shuffle(&cat(&[&a, &y]), 2));
    }
    let (x0, x1) = (ys[0].clone(), ys[1].clone());

    // stepped channel-attention fusion
    let f = "stage0.module0.fusion";
    let to0 = mul(&channel_mean(&x1), &p.gate(&gap(&x0), &format!("{f}.1to0")));
    let y0 = add(&x0, &nearest(&to0, 2));
    let to1 = mul(&avg_pool(&channel_mean(&x0), 2), &p.gate(&gap(&x1), &format!("{f}.0to1")));
    let y1 = add(&x1, &to1);

    // multi-resolution head
    let h0 = p.conv_bias(&y0, "head.b0.conv");
    let h1 = bilinear(&p.conv_bias(&y1, "head.b1.conv"), 2);
    add(&h0, &h1)
}

/// Replaces zero-initialized biases, batch-norm affine terms and running
/// statistics with random values so every parameter affects the output.
pub fn randomize(params: &mut ModelParams<f64>, seed: u64) {
    let mut r = rng(seed);
    for (name, t) in params.params_mut() {
        let range = if name.ends_with("gamma") {
            0.5..1.5
        } else if name.ends_with("beta") || name.ends_with("bias") {
            -0.3..0.3
        } else {
            continue;
        };
        for v in t.data_mut() {
            *v = r.random_range(range.clone());
        }
    }
    let names: Vec<String> = params.buffers().map(|(n, _)| n.clone()).collect();
    for n in names {
        let range = if n.ends_with("running_var") { 0.5..1.5 } else { -0.2..0.2 };
        for v in params.buffer_mut(&n).unwrap().data_mut() {
            *v = r.random_range(range.clone());
        }
    }
}

/// Largest error between analytic and central-difference gradients, as
/// `|a − n| / max(|a|, |n|, FLOOR)`.
pub const FD_FLOOR: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug)]
pub struct GradReport {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

/// Checks d(Σ y ⊙ R)/d(inputs, params) for `f`, with R a fixed random tensor.
/// Up to `per_tensor` entries of every input and parameter are probed.
pub fn grad_check(
    decls: &ParamDecls,
    inputs: &[Tensor<f64>],
    mode: Mode,
    per_tensor: usize,
    seed: u64,
    f: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
) -> GradReport {
    let mut params = ModelParams::<f64>::from_decls(decls, seed).unwrap();
    randomize(&mut params, seed ^ 0x9e37);
    grad_check_with(&params, inputs, mode, per_tensor, seed, f)
}

pub fn grad_check_with(
    params: &ModelParams<f64>,
    inputs: &[Tensor<f64>],
    mode: Mode,
    per_tensor: usize,
    seed: u64,
    f: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
) -> GradReport {
    let mut r = rng(seed.wrapping_add(17));
    let weights: std::cell::RefCell<Option<Tensor<f64>>> = Default::default();

    let eval = |params: &ModelParams<f64>, inputs: &[Tensor<f64>], grads: bool| {
        let mut g = Graph::with_params(params);
        g.set_mode(mode).set_track_params(grads);
        let xs: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), grads)).collect();
        let y = f(&mut g, &xs).unwrap();
        let loss = if g.value(y).numel() == 1 {
            y
        } else {
            let shape = g.shape(y);
            let w = weights
                .borrow_mut()
                .get_or_insert_with(|| randn(shape, &mut rng(seed.wrapping_add(99))))
                .clone();
            let wv = g.leaf(w, false);
            let prod = g.mul(y, wv).unwrap();
            g.sum(prod).unwrap()
        };
        let value = g.value(loss).data()[0];
        if !grads {
            return (value, vec![], Default::default());
        }
        g.backward(loss).unwrap();
        let gi: Vec<Vec<f64>> = xs.iter().map(|&v| g.grad(v).map(|s| s.to_vec()).unwrap_or_default()).collect();
        (value, gi, g.param_grads())
    };

    let (_, input_grads, param_grads) = eval(params, inputs, true);
    let mut report = GradReport { max_rel: 0.0, worst: String::new(), checked: 0 };
    let note = |what: String, a: f64, n: f64, rep: &mut GradReport| {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR);
        rep.checked += 1;
        if rel > rep.max_rel || !rel.is_finite() {
            rep.max_rel = if rel.is_finite() { rel } else { f64::INFINITY };
            rep.worst = format!("{what}: analytic {a:e}, numeric {n:e}");
        }
    };

    for (k, t) in inputs.iter().enumerate() {
        let picks = sample_indices(t.numel(), per_tensor, &mut r);
        for i in picks {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let n = (eval(params, &plus, false).0 - eval(params, &minus, false).0) / (2.0 * FD_STEP);
            let a = input_grads[k].get(i).copied().unwrap_or(0.0);
            note(format!("input {k}[{i}]"), a, n, &mut report);
        }
    }
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let numel = params.get(&name).unwrap().numel();
        for i in sample_indices(numel, per_tensor, &mut r) {
            let mut plus = params.clone();
            plus.get_mut(&name).unwrap().data_mut()[i] += FD_STEP;
            let mut minus = params.clone();
            minus.get_mut(&name).unwrap().data_mut()[i] -= FD_STEP;
            let n = (eval(&plus, inputs, false).0 - eval(&minus, inputs, false).0) / (2.0 * FD_STEP);
            let a = param_grads.get(&name).map_or(0.0, |g| g[i]);
            note(format!("{name}[{i}]"), a, n, &mut report);
        }
    }
    report
}

fn sample_indices(n: usize, k: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    rand::seq::index::sample(r, n, k).into_vec()
}
