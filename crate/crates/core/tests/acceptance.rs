//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line; exits non-zero on failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segmatte::adapter::{self, FIXED_TOKENS};
use segmatte::backbone::{self, BoxPrompt, EncoderConfig, Point, PointLabel, PromptSet};
use segmatte::heads::{self, HeadConfig, Task};
use segmatte::metrics::{self, Plane};
use segmatte::model::{Model, ModelConfig};
use segmatte::multiview;
use segmatte::nn;
use segmatte::objectives;
use segmatte::params::{Ctx, Init, ParamGroup, ParamStore};
use segmatte::synth::{self, PromptMode};
use segmatte::tensor::gradcheck::{check_gradients, DEFAULT_STEP};
use segmatte::tensor::ops::Padding;
use segmatte::train::{TaskSchedule, TrainConfig, Trainer};
use segmatte::{Graph, Result, Tensor, Var};

type Outcome = std::result::Result<String, String>;
type Criterion = (u8, &'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi)).unwrap()
}

/// Magnitudes in [lo, hi] with random sign (keeps away from kinks at 0).
fn signed(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(lo..hi);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
    .unwrap()
}

// ---------------------------------------------------------------- 1

type Fwd = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// Reduces any output to a scalar with fixed non-uniform weights so every
/// output element contributes a distinct direction.
fn probe(g: &mut Graph, v: Var) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let w = Tensor::from_fn(&shape, |i| 0.5 + ((i * 37) % 17) as f64 / 17.0)?;
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    g.sum(p)
}

fn unary(f: fn(&mut Graph, Var) -> Result<Var>) -> Fwd {
    Box::new(move |g, v| {
        let y = f(g, v[0])?;
        probe(g, y)
    })
}

fn binary(f: fn(&mut Graph, Var, Var) -> Result<Var>) -> Fwd {
    Box::new(move |g, v| {
        let y = f(g, v[0], v[1])?;
        probe(g, y)
    })
}

fn loss_with_target(t: Tensor, f: fn(&mut Graph, Var, Var) -> Result<Var>) -> Fwd {
    Box::new(move |g, v| {
        let tv = g.constant(t.clone());
        f(g, v[0], tv)
    })
}

struct Case {
    name: &'static str,
    build: fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Fwd),
}

fn n_elems(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(5..=15)
}

fn plane_shape(rng: &mut ChaCha8Rng) -> [usize; 3] {
    // h·w in 6..=15
    let opts = [[1, 2, 3], [1, 2, 4], [1, 3, 3], [1, 3, 4], [1, 2, 5], [1, 3, 5], [1, 2, 6], [1, 2, 7]];
    opts[rng.gen_range(0..opts.len())]
}

fn cases() -> Vec<Case> {
    macro_rules! case {
        ($name:expr, $body:expr) => {
            Case { name: $name, build: $body }
        };
    }
    vec![
        case!("sigmoid", |r| (vec![uniform(&[n_elems(r)], -3.0, 3.0, r)], unary(|g, a| g.sigmoid(a)))),
        case!("gelu", |r| (vec![uniform(&[n_elems(r)], -3.0, 3.0, r)], unary(|g, a| g.gelu(a)))),
        case!("exp", |r| (vec![uniform(&[n_elems(r)], -2.0, 2.0, r)], unary(|g, a| g.exp(a)))),
        case!("ln", |r| (vec![uniform(&[n_elems(r)], 0.2, 3.0, r)], unary(|g, a| g.ln(a)))),
        case!("abs", |r| (vec![signed(&[n_elems(r)], 0.1, 2.0, r)], unary(|g, a| g.abs(a)))),
        case!("sqrt", |r| (vec![uniform(&[n_elems(r)], 0.2, 3.0, r)], unary(|g, a| g.sqrt(a)))),
        case!("square", |r| (vec![uniform(&[n_elems(r)], -2.0, 2.0, r)], unary(|g, a| g.square(a)))),
        case!("clamp", |r| {
            // values at least 0.05 from the bounds ±0.5
            let n = n_elems(r);
            let x = Tensor::from_fn(&[n], |_| {
                let pick = [r.gen_range(-1.0..-0.55), r.gen_range(-0.45..0.45), r.gen_range(0.55..1.0)];
                pick[r.gen_range(0..3)]
            })
            .unwrap();
            (vec![x], unary(|g, a| g.clamp(a, -0.5, 0.5)))
        }),
        case!("scale", |r| (vec![uniform(&[n_elems(r)], -2.0, 2.0, r)], unary(|g, a| g.scale(a, -1.7)))),
        case!("add_scalar", |r| (vec![uniform(&[n_elems(r)], -2.0, 2.0, r)], unary(|g, a| g.add_scalar(a, 0.3)))),
        case!("add", |r| {
            let n = n_elems(r);
            (vec![uniform(&[n], -2.0, 2.0, r), uniform(&[n], -2.0, 2.0, r)], binary(|g, a, b| g.add(a, b)))
        }),
        case!("sub", |r| {
            let n = n_elems(r);
            (vec![uniform(&[n], -2.0, 2.0, r), uniform(&[n], -2.0, 2.0, r)], binary(|g, a, b| g.sub(a, b)))
        }),
        case!("mul", |r| {
            let n = n_elems(r);
            (vec![uniform(&[n], -2.0, 2.0, r), uniform(&[n], -2.0, 2.0, r)], binary(|g, a, b| g.mul(a, b)))
        }),
        case!("div", |r| {
            let n = n_elems(r);
            (vec![uniform(&[n], -2.0, 2.0, r), signed(&[n], 0.5, 2.0, r)], binary(|g, a, b| g.div(a, b)))
        }),
        case!("matmul", |r| {
            let (m, k, n) = (r.gen_range(2..=3), r.gen_range(2..=4), r.gen_range(2..=3));
            (vec![uniform(&[m, k], -1.0, 1.0, r), uniform(&[k, n], -1.0, 1.0, r)], binary(|g, a, b| g.matmul(a, b)))
        }),
        case!("transpose", |r| (vec![uniform(&[2, r.gen_range(3..=7)], -1.0, 1.0, r)], unary(|g, a| g.transpose(a)))),
        case!("add_row_bias", |r| {
            let n = r.gen_range(3..=5);
            (vec![uniform(&[2, n], -1.0, 1.0, r), uniform(&[n], -1.0, 1.0, r)], binary(|g, a, b| g.add_row_bias(a, b)))
        }),
        case!("softmax_rows", |r| (vec![uniform(&[r.gen_range(2..=3), 4], -3.0, 3.0, r)], unary(|g, a| g.softmax(a, 1)))),
        case!("softmax_cols", |r| (vec![uniform(&[3, r.gen_range(2..=5)], -3.0, 3.0, r)], unary(|g, a| g.softmax(a, 0)))),
        case!("sum", |r| (vec![uniform(&[n_elems(r)], -2.0, 2.0, r)], Box::new(|g: &mut Graph, v: &[Var]| g.sum(v[0])))),
        case!("mean", |r| (vec![uniform(&[n_elems(r)], -2.0, 2.0, r)], Box::new(|g: &mut Graph, v: &[Var]| g.mean(v[0])))),
        case!("reshape", |r| (vec![uniform(&[2, 6], -1.0, 1.0, r)], unary(|g, a| g.reshape(a, &[3, 4])))),
        case!("slice_cols", |r| (vec![uniform(&[2, r.gen_range(4..=7)], -1.0, 1.0, r)], unary(|g, a| g.slice_cols(a, 1, 3)))),
        case!("concat_cols", |r| {
            (vec![uniform(&[2, 3], -1.0, 1.0, r), uniform(&[2, 2], -1.0, 1.0, r)], binary(|g, a, b| g.concat_cols(&[a, b])))
        }),
        case!("slice_rows", |r| (vec![uniform(&[r.gen_range(3..=5), 3], -1.0, 1.0, r)], unary(|g, a| g.slice_rows(a, 1, 3)))),
        case!("concat_rows", |r| {
            (vec![uniform(&[2, 3], -1.0, 1.0, r), uniform(&[1, 3], -1.0, 1.0, r)], binary(|g, a, b| g.concat_rows(&[a, b])))
        }),
        case!("stack", |r| {
            let n = r.gen_range(3..=7);
            (vec![uniform(&[n], -1.0, 1.0, r), uniform(&[n], -1.0, 1.0, r)], binary(|g, a, b| g.stack(&[a, b])))
        }),
        case!("select", |r| (vec![uniform(&[3, r.gen_range(2..=5)], -1.0, 1.0, r)], unary(|g, a| g.select(a, 1)))),
        case!("crop2d", |r| (vec![uniform(&[1, 3, 4], -1.0, 1.0, r)], unary(|g, a| g.crop2d(a, 1, 1, 2, 2)))),
        case!("bilinear_up", |r| (vec![uniform(&plane_shape(r), -1.0, 1.0, r)], unary(|g, a| g.bilinear_resize(a, 5, 7)))),
        case!("bilinear_down", |r| (vec![uniform(&[1, 3, 5], -1.0, 1.0, r)], unary(|g, a| g.bilinear_resize(a, 2, 2)))),
        case!("avg_pool2d", |r| (vec![uniform(&[1, 2, 6], -1.0, 1.0, r)], unary(|g, a| g.avg_pool2d(a, 2)))),
        case!("conv2d_3x3", |r| {
            let x = uniform(&[1, 1, 3, 4], -1.0, 1.0, r);
            let w = uniform(&[1, 1, 3, 3], -1.0, 1.0, r);
            let b = uniform(&[1], -1.0, 1.0, r);
            (vec![x, w, b], Box::new(|g: &mut Graph, v: &[Var]| {
                let y = g.conv2d(v[0], v[1], v[2])?;
                probe(g, y)
            }))
        }),
        case!("conv2d_1x1", |r| {
            let x = uniform(&[1, 2, 2, 3], -1.0, 1.0, r);
            let w = uniform(&[3, 2, 1, 1], -1.0, 1.0, r);
            let b = uniform(&[3], -1.0, 1.0, r);
            (vec![x, w, b], Box::new(|g: &mut Graph, v: &[Var]| {
                let y = g.conv2d(v[0], v[1], v[2])?;
                probe(g, y)
            }))
        }),
        case!("filter2d_zero", |r| {
            let k = uniform(&[3, 3], -1.0, 1.0, r);
            (vec![uniform(&plane_shape(r), -1.0, 1.0, r)], Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.filter2d(v[0], &k, Padding::Zero)?;
                probe(g, y)
            }))
        }),
        case!("filter2d_replicate", |r| {
            let k = uniform(&[3, 3], -1.0, 1.0, r);
            (vec![uniform(&plane_shape(r), -1.0, 1.0, r)], Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.filter2d(v[0], &k, Padding::Replicate)?;
                probe(g, y)
            }))
        }),
        case!("filter2d_valid", |r| {
            let k = uniform(&[2, 2], -1.0, 1.0, r);
            (vec![uniform(&plane_shape(r), -1.0, 1.0, r)], Box::new(move |g: &mut Graph, v: &[Var]| {
                let y = g.filter2d(v[0], &k, Padding::Valid)?;
                probe(g, y)
            }))
        }),
        case!("subsample2", |r| (vec![uniform(&[1, 2, 6], -1.0, 1.0, r)], unary(|g, a| g.subsample2(a)))),
        case!("layer_norm", |r| (vec![uniform(&[2, r.gen_range(3..=7)], -2.0, 2.0, r)], unary(|g, a| g.layer_norm(a, 1e-5)))),
        case!("batch_norm", |r| (vec![uniform(&[2, 2, 1, 3], -2.0, 2.0, r)], unary(|g, a| g.batch_norm(a, 1e-5)))),
        case!("channel_affine", |r| {
            let x = uniform(&[1, 2, 2, 2], -1.0, 1.0, r);
            let (ga, be) = (uniform(&[2], 0.5, 1.5, r), uniform(&[2], -1.0, 1.0, r));
            (vec![x, ga, be], Box::new(|g: &mut Graph, v: &[Var]| {
                let y = g.channel_affine(v[0], v[1], v[2])?;
                probe(g, y)
            }))
        }),
        case!("attention", |r| {
            let q = uniform(&[2, 4], -1.0, 1.0, r);
            let k = uniform(&[3, 4], -1.0, 1.0, r);
            let v = uniform(&[3, 4], -1.0, 1.0, r);
            (vec![q, k, v], Box::new(|g: &mut Graph, v: &[Var]| {
                let y = nn::attention_core(g, v[0], v[1], v[2], 2)?.output;
                probe(g, y)
            }))
        }),
        case!("loss_bce", |r| {
            let s = plane_shape(r);
            let t = Tensor::from_fn(&s, |_| if r.gen_bool(0.5) { 1.0 } else { 0.0 }).unwrap();
            (vec![uniform(&s, 0.05, 0.95, r)], loss_with_target(t, objectives::bce))
        }),
        case!("loss_soft_iou", |r| {
            let s = plane_shape(r);
            let t = uniform(&s, 0.0, 1.0, r);
            (vec![uniform(&s, 0.05, 0.95, r)], loss_with_target(t, objectives::soft_iou))
        }),
        case!("loss_ssim", |r| {
            // 7x7 is the smallest input the valid-only 7x7 window accepts
            let t = uniform(&[1, 7, 7], 0.0, 1.0, r);
            (vec![uniform(&[1, 7, 7], 0.0, 1.0, r)], loss_with_target(t, objectives::ssim))
        }),
        case!("loss_gradient", |r| {
            let s = plane_shape(r);
            let t = uniform(&s, 0.0, 1.0, r);
            (vec![uniform(&s, 0.0, 1.0, r)], loss_with_target(t, objectives::gradient))
        }),
        case!("loss_laplacian_l2", |r| {
            // 4x4 is the smallest input a 2-level pyramid accepts
            let t = uniform(&[1, 4, 4], 0.0, 1.0, r);
            (vec![uniform(&[1, 4, 4], 0.0, 1.0, r)], Box::new(move |g: &mut Graph, v: &[Var]| {
                let tv = g.constant(t.clone());
                objectives::laplacian(g, v[0], tv, 2)
            }))
        }),
        case!("loss_laplacian_l3", |r| {
            let t = uniform(&[1, 8, 8], 0.0, 1.0, r);
            (vec![uniform(&[1, 8, 8], 0.0, 1.0, r)], Box::new(move |g: &mut Graph, v: &[Var]| {
                let tv = g.constant(t.clone());
                objectives::laplacian(g, v[0], tv, 3)
            }))
        }),
        case!("loss_l1", |r| {
            let s = plane_shape(r);
            let t = uniform(&s, 0.0, 1.0, r);
            (vec![uniform(&s, 0.0, 1.0, r)], loss_with_target(t, objectives::l1))
        }),
    ]
}

fn criterion_gradients() -> Outcome {
    const SEEDS: u64 = 20;
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    let mut worst = (0.0f64, "", 0u64);
    let mut checked = 0;
    let cases = cases();
    for case in &cases {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 1);
            let (inputs, f) = (case.build)(&mut rng);
            let rep = check_gradients(&inputs, DEFAULT_STEP, f).map_err(|e| format!("{}: {e}", case.name))?;
            checked += rep.checked;
            if rep.max_rel_error > worst.0 {
                worst = (rep.max_rel_error, case.name, seed);
            }
        }
    }
    let took = start.elapsed();
    let detail = format!(
        "{} ops/losses x {SEEDS} seeds, {checked} partials, max rel err {:.2e} ({} seed {}), {:.1}s",
        cases.len(),
        worst.0,
        worst.1,
        worst.2,
        took.as_secs_f64()
    );
    ensure(worst.0 < TOL, format!("rel err above {TOL:e}: {detail}"))?;
    ensure(took < Duration::from_secs(60), format!("too slow: {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------- 2

fn criterion_compositing() -> Outcome {
    let mut max_err = 0.0f64;
    let (mut exact0, mut exact1, mut samples) = (0usize, 0usize, 0usize);
    for (seed, size) in (0..40u64).map(|s| (s, 64)).chain((40..45).map(|s| (s, 96))).chain((45..50).map(|s| (s, 32))) {
        let s = e2s(synth::generate_sample::<f64>(seed, size))?;
        let hw = size * size;
        for c in 0..3 {
            for i in 0..hw {
                let a = s.alpha.data()[i];
                let (f, b, img) = (s.fg.data()[c * hw + i], s.bg.data()[c * hw + i], s.image.data()[c * hw + i]);
                max_err = max_err.max((img - (a * f + (1.0 - a) * b)).abs());
                if a == 0.0 {
                    ensure(img == b, format!("seed {seed}: alpha 0 pixel differs from background"))?;
                    exact0 += 1;
                } else if a == 1.0 {
                    ensure(img == f, format!("seed {seed}: alpha 1 pixel differs from foreground"))?;
                    exact1 += 1;
                }
            }
        }
        samples += 1;
    }
    ensure(exact0 > 0 && exact1 > 0, "generator produced no alpha 0/1 pixels")?;
    ensure(max_err <= 1e-12, format!("max reconstruction error {max_err:.3e}"))?;
    Ok(format!("{samples} samples, max |I - (aF + (1-a)B)| = {max_err:.1e}, {exact0}+{exact1} alpha-0/1 pixels exact"))
}

// ---------------------------------------------------------------- 3

mod oracle {
    /// Brute-force nearest foreground pixel: Euclidean distance, ties to the
    /// smallest (row, col).
    pub fn nearest_fg(g: &[bool], h: usize, w: usize) -> Vec<(f64, usize)> {
        (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                let mut best = (f64::INFINITY, usize::MAX);
                for j in (0..h * w).filter(|&j| g[j]) {
                    let (yy, xx) = ((j / w) as f64, (j % w) as f64);
                    let d = ((y - yy).powi(2) + (x - xx).powi(2)).sqrt();
                    if d < best.0 {
                        best = (d, j);
                    }
                }
                best
            })
            .collect()
    }

    /// Weighted F-measure, direct transcription of the reference definition.
    pub fn weighted_f(pred: &[f64], g: &[bool], h: usize, w: usize) -> f64 {
        let gd: Vec<f64> = g.iter().map(|&v| v as u8 as f64).collect();
        let e: Vec<f64> = pred.iter().zip(&gd).map(|(p, t)| (t - p).abs()).collect();
        let near = nearest_fg(g, h, w);
        let et: Vec<f64> = (0..h * w).map(|i| if g[i] { e[i] } else { e[near[i].1] }).collect();
        // 7x7 Gaussian, sigma 5, normalized
        let mut k = [[0.0; 7]; 7];
        let mut s = 0.0;
        for (dy, row) in k.iter_mut().enumerate() {
            for (dx, v) in row.iter_mut().enumerate() {
                let (a, b) = (dy as f64 - 3.0, dx as f64 - 3.0);
                *v = (-(a * a + b * b) / (2.0 * 25.0)).exp();
                s += *v;
            }
        }
        let mut ea = vec![0.0; h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for dy in -3..=3isize {
                    for dx in -3..=3isize {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                            acc += k[(dy + 3) as usize][(dx + 3) as usize] / s * et[yy as usize * w + xx as usize];
                        }
                    }
                }
                ea[y as usize * w + x as usize] = acc;
            }
        }
        let mut ew = vec![0.0; h * w];
        for i in 0..h * w {
            let m = if g[i] && ea[i] < e[i] { ea[i] } else { e[i] };
            let b = if g[i] { 1.0 } else { 2.0 - (0.5f64.ln() / 5.0 * near[i].0).exp() };
            ew[i] = m * b;
        }
        let nfg = gd.iter().sum::<f64>();
        let tpw = nfg - (0..h * w).filter(|&i| g[i]).map(|i| ew[i]).sum::<f64>();
        let fpw: f64 = (0..h * w).filter(|&i| !g[i]).map(|i| ew[i]).sum();
        let r = 1.0 - (0..h * w).filter(|&i| g[i]).map(|i| ew[i]).sum::<f64>() / nfg;
        let eps = f64::EPSILON;
        let p = tpw / (eps + tpw + fpw);
        2.0 * r * p / (eps + r + p)
    }

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    fn object_score(v: &[f64]) -> f64 {
        let x = mean(v);
        let sd = if v.len() > 1 { (v.iter().map(|a| (a - x).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt() } else { 0.0 };
        2.0 * x / (x * x + 1.0 + sd + f64::EPSILON)
    }

    fn ssim_region(p: &[f64], t: &[f64]) -> f64 {
        if p.is_empty() {
            return 0.0;
        }
        let n = p.len() as f64;
        let (x, y) = (mean(p), mean(t));
        let d = if p.len() > 1 { n - 1.0 } else { f64::INFINITY };
        let sx = p.iter().map(|a| (a - x).powi(2)).sum::<f64>() / d;
        let sy = t.iter().map(|a| (a - y).powi(2)).sum::<f64>() / d;
        let sxy = p.iter().zip(t).map(|(a, b)| (a - x) * (b - y)).sum::<f64>() / d;
        let alpha = 4.0 * x * y * sxy;
        let beta = (x * x + y * y) * (sx + sy);
        if alpha != 0.0 {
            alpha / (beta + f64::EPSILON)
        } else if beta == 0.0 {
            1.0
        } else {
            0.0
        }
    }

    /// Structure measure, transcribed from the PySODMetrics definition.
    pub fn s_measure(pred: &[f64], g: &[bool], h: usize, w: usize) -> f64 {
        let gt: Vec<f64> = g.iter().map(|&v| v as u8 as f64).collect();
        let u = mean(&gt);
        if u == 0.0 {
            return 1.0 - mean(pred);
        }
        if u == 1.0 {
            return mean(pred);
        }
        let fg: Vec<f64> = (0..h * w).filter(|&i| g[i]).map(|i| pred[i]).collect();
        let bg: Vec<f64> = (0..h * w).filter(|&i| !g[i]).map(|i| 1.0 - pred[i]).collect();
        let so = u * object_score(&fg) + (1.0 - u) * object_score(&bg);

        let pts: Vec<(f64, f64)> = (0..h * w).filter(|&i| g[i]).map(|i| ((i / w) as f64, (i % w) as f64)).collect();
        let cy = (pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64).round_ties_even() as usize + 1;
        let cx = (pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64).round_ties_even() as usize + 1;
        let region = |y0: usize, y1: usize, x0: usize, x1: usize| {
            let mut p = vec![];
            let mut t = vec![];
            for y in y0..y1 {
                for x in x0..x1 {
                    p.push(pred[y * w + x]);
                    t.push(gt[y * w + x]);
                }
            }
            ssim_region(&p, &t)
        };
        let area = (h * w) as f64;
        let w1 = (cx * cy) as f64 / area;
        let w2 = ((w - cx) * cy) as f64 / area;
        let w3 = (cx * (h - cy)) as f64 / area;
        let w4 = 1.0 - w1 - w2 - w3;
        let sr = w1 * region(0, cy, 0, cx) + w2 * region(0, cy, cx, w) + w3 * region(cy, h, 0, cx) + w4 * region(cy, h, cx, w);
        (0.5 * so + 0.5 * sr).max(0.0)
    }

    /// Mean enhanced-alignment measure over 256 midpoint thresholds.
    pub fn e_measure(pred: &[f64], g: &[bool]) -> f64 {
        let n = g.len() as f64;
        let gt: Vec<f64> = g.iter().map(|&v| v as u8 as f64).collect();
        let mg = mean(&gt);
        let mut total = 0.0;
        for k in 0..256 {
            let t = (k as f64 + 0.5) / 256.0;
            let fm: Vec<f64> = pred.iter().map(|&p| if p >= t { 1.0 } else { 0.0 }).collect();
            let score = if mg == 0.0 {
                fm.iter().map(|v| 1.0 - v).sum::<f64>() / n
            } else if mg == 1.0 {
                fm.iter().sum::<f64>() / n
            } else {
                let mf = mean(&fm);
                fm.iter()
                    .zip(&gt)
                    .map(|(f, t)| {
                        let (a, b) = (f - mf, t - mg);
                        let align = 2.0 * a * b / (a * a + b * b + f64::EPSILON);
                        (align + 1.0).powi(2) / 4.0
                    })
                    .sum::<f64>()
                    / n
            };
            total += score;
        }
        total / 256.0
    }
}

fn criterion_metric_oracles() -> Outcome {
    let bits = |m: u8| -> Vec<f64> { (0..4).map(|i| ((m >> i) & 1) as f64).collect() };
    let mut worst = 0.0f64;
    for pm in 0..16u8 {
        for gm in 0..16u8 {
            let (p, t) = (bits(pm), bits(gm));
            let pred = Plane::new(2, 2, p.clone()).unwrap();
            let gt = Plane::new(2, 2, t.clone()).unwrap();
            let tp = p.iter().zip(&t).filter(|(a, b)| **a == 1.0 && **b == 1.0).count() as f64;
            let fp = p.iter().zip(&t).filter(|(a, b)| **a == 1.0 && **b == 0.0).count() as f64;
            let fn_ = p.iter().zip(&t).filter(|(a, b)| **a == 0.0 && **b == 1.0).count() as f64;
            let f_exp = if tp == 0.0 {
                0.0
            } else {
                let (pr, rc) = (tp / (tp + fp), tp / (tp + fn_));
                1.3 * pr * rc / (0.3 * pr + rc)
            };
            let union = tp + fp + fn_;
            let iou_exp = if union == 0.0 { 1.0 } else { tp / union };
            let sad = fp + fn_;
            let pairs = [
                ("f_max", e2s(metrics::f_measure_max(&pred, &gt))?.0, f_exp),
                ("mae", e2s(metrics::mae(&pred, &gt))?, sad / 4.0),
                ("miou", e2s(metrics::miou(&pred, &gt, 0.5))?, iou_exp),
            ];
            let me = e2s(metrics::matting_errors(&pred, &gt))?;
            let matte = [
                ("sad_raw", me.sad_raw, sad),
                ("sad_k", me.sad_k, sad / 1000.0),
                ("mse_raw", me.mse_raw, sad / 4.0),
                ("mse_k", me.mse_k, sad / 4.0 * 1000.0),
            ];
            for (name, got, want) in pairs.into_iter().chain(matte) {
                let d = (got - want).abs();
                worst = worst.max(d);
                ensure(d <= 1e-9, format!("{name} pred {pm:04b} gt {gm:04b}: {got} vs {want}"))?;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_oracle = 0.0f64;
    for pair in 0..20 {
        let (h, w) = (8, 8);
        let g: Vec<bool> = loop {
            let g: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.4)).collect();
            if g.iter().any(|&v| v) && g.iter().any(|&v| !v) {
                break g;
            }
        };
        let p: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let pred = Plane::new(h, w, p.clone()).unwrap();
        let gt = Plane::new(h, w, g.iter().map(|&v| v as u8 as f64).collect()).unwrap();
        let checks = [
            ("f_weighted", e2s(metrics::f_measure_weighted(&pred, &gt))?, oracle::weighted_f(&p, &g, h, w)),
            ("s_measure", e2s(metrics::s_measure(&pred, &gt))?, oracle::s_measure(&p, &g, h, w)),
            ("e_measure", e2s(metrics::e_measure(&pred, &gt))?, oracle::e_measure(&p, &g)),
        ];
        for (name, got, want) in checks {
            let d = (got - want).abs();
            worst_oracle = worst_oracle.max(d);
            ensure(d <= 1e-6, format!("{name} pair {pair}: {got} vs oracle {want}"))?;
        }
    }
    Ok(format!(
        "256 2x2 pairs x 7 metrics max dev {worst:.1e}; 20 8x8 pairs weighted-F/S/E max dev {worst_oracle:.1e}"
    ))
}

// ---------------------------------------------------------------- 4

const FROZEN: [ParamGroup; 4] = [ParamGroup::Encoder, ParamGroup::PromptEncoder, ParamGroup::Decoder, ParamGroup::SamTokens];

fn small_train(schedule: TaskSchedule, steps: u64) -> TrainConfig {
    TrainConfig {
        dataset_size: 2,
        batch_size: 2,
        max_steps: steps,
        output_resolution: 64,
        task_schedule: schedule,
        ..Default::default()
    }
}

fn criterion_freeze() -> Outcome {
    let mut t: Trainer = e2s(Trainer::new(small_train(TaskSchedule::Alternate, 10)))?;
    let before: Vec<_> = ParamGroup::ALL.iter().map(|&g| t.model.store.group_bytes(g)).collect();
    let mut optimized: Vec<String> = t.adam.slots.keys().cloned().collect();
    optimized.sort();
    ensure(optimized == t.model.store.trainable_names(), "optimizer set differs from trainable set")?;
    e2s(t.run::<std::io::Sink>(None))?;
    for (i, g) in ParamGroup::ALL.iter().enumerate() {
        let same = t.model.store.group_bytes(*g) == before[i];
        if FROZEN.contains(g) {
            ensure(same, format!("{g:?} changed during training"))?;
        } else {
            ensure(!same, format!("trainable group {g:?} never moved"))?;
        }
    }

    for (schedule, moved, kept) in [
        (TaskSchedule::SegOnly, ParamGroup::SegHead, ParamGroup::MatteHead),
        (TaskSchedule::MatteOnly, ParamGroup::MatteHead, ParamGroup::SegHead),
    ] {
        let mut t: Trainer = e2s(Trainer::new(small_train(schedule, 10)))?;
        let (m0, k0) = (t.model.store.group_bytes(moved), t.model.store.group_bytes(kept));
        e2s(t.run::<std::io::Sink>(None))?;
        ensure(t.model.store.group_bytes(kept) == k0, format!("{kept:?} changed under {schedule:?}"))?;
        ensure(t.model.store.group_bytes(moved) != m0, format!("{moved:?} did not train under {schedule:?}"))?;
        let idle = t.adam.slots.iter().filter(|(n, _)| ParamGroup::of(n).unwrap() == kept).all(|(_, s)| s.t == 0);
        ensure(idle, format!("{kept:?} optimizer state advanced under {schedule:?}"))?;
    }
    Ok("10 alternating steps: 4 frozen groups byte-identical, 5 trainable groups moved; seg-only/matte-only leave the other head byte-identical".into())
}

// ---------------------------------------------------------------- 5

fn criterion_shapes() -> Outcome {
    let model: Model = e2s(Model::init(e2s(ModelConfig::new(64, EncoderConfig::default(), 256))?, 5))?;
    let d = model.config.encoder.embed_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (b, h, w) in [(1, 64, 64), (2, 64, 96), (1, 128, 64)] {
        let img = uniform(&[b, 3, h, w], 0.0, 1.0, &mut rng);
        let views = e2s(multiview::crop_views(&img))?;
        for v in &views.locals {
            ensure(v.shape() == [b, 3, h / 2, w / 2], format!("view {:?} of {h}x{w}", v.shape()))?;
        }
        ensure(e2s(multiview::stitch(&views.locals))? == img, "stitched views differ from the image")?;
        let local = e2s(multiview::encode_views(&model.store, &model.config.encoder, &views))?;
        ensure(local.stacked.shape() == [b, 4, d, h / 16, w / 16], format!("F^L shape {:?}", local.stacked.shape()))?;
    }

    let sample = e2s(synth::generate_sample::<f64>(1, 64))?;
    let prompt_cases: Vec<(PromptSet, usize)> = vec![
        (e2s(synth::sample_prompts(&sample.mask, 0, PromptMode::Points { k: 1 }))?, 1),
        (e2s(synth::sample_prompts(&sample.mask, 0, PromptMode::Points { k: 10 }))?, 10),
        (e2s(synth::sample_prompts(&sample.mask, 0, PromptMode::Box))?, 2),
        (
            PromptSet {
                points: vec![Point { x: 3.0, y: 4.0, label: PointLabel::Bg }; 3],
                bbox: Some(BoxPrompt { x0: 1.0, y0: 1.0, x1: 40.0, y1: 50.0 }),
                coarse_mask: None,
            },
            5,
        ),
        (e2s(synth::sample_prompts(&sample.mask, 0, PromptMode::CoarseMask))?, 0),
    ];
    let mut lens = vec![];
    for (p, n_prompt) in &prompt_cases {
        let pe = e2s(backbone::encode_prompts(&model.store, p, 64, 64))?;
        let mut cx = Ctx::inference(&model.store);
        let block = e2s(adapter::assemble_tokens(&mut cx, pe.tokens.as_ref()))?;
        let rows = cx.g.shape(block.tokens)[0];
        ensure(rows == FIXED_TOKENS + n_prompt && FIXED_TOKENS == 7, format!("{rows} tokens for {n_prompt} prompt tokens"))?;
        lens.push(rows);
    }

    let img = sample.image.reshape(&[1, 3, 64, 64]).unwrap();
    let (seg, matte) = e2s(model.predict(&img, &[prompt_cases[2].0.clone()], true))?;
    ensure(seg.shape() == [1, 1, 256, 256] && matte.shape() == [1, 1, 256, 256], format!("toy heads {:?}", seg.shape()))?;

    // full-scale heads: 64x64 grid of 256-wide features to 1024x1024
    let cfg = e2s(HeadConfig::for_grid(64, 1024, 256))?;
    let mut store = ParamStore::new();
    let mut hr = ChaCha8Rng::seed_from_u64(3);
    e2s(heads::init_params(&mut store, &mut Init { rng: &mut hr }, &cfg, 256))?;
    let mut cx = Ctx::inference(&store);
    let feats = cx.g.constant(uniform(&[1, 256, 64, 64], -1.0, 1.0, &mut rng));
    let tokens = cx.g.constant(uniform(&[FIXED_TOKENS + 2, 256], -1.0, 1.0, &mut rng));
    let mut full = vec![];
    for task in [Task::Seg, Task::Matte] {
        let out = e2s(heads::predict(&mut cx, &cfg, task, &[tokens], feats))?;
        full.push(cx.g.shape(out).to_vec());
    }
    ensure(full.iter().all(|s| s == &[1, 1, 1024, 1024]), format!("full-scale heads {full:?}"))?;
    Ok(format!(
        "views (2h,2w) and F^L [B,4,C,H/16,W/16] for 3 sizes; token rows {lens:?} = 7 + prompts; heads 256^2 (toy) and 1024^2 (64-grid, D=256, stages {:?})",
        cfg.channels
    ))
}

// ---------------------------------------------------------------- 6

fn criterion_zero_adapter() -> Outcome {
    let mut model: Model = e2s(Model::init(e2s(ModelConfig::new(64, EncoderConfig::default(), 64))?, 8))?;
    for r in 1..=adapter::ROUNDS {
        let n = model.store.fill_prefix(&format!("adapter.round{r}.stage1.out"), 0.0);
        ensure(n == 2, format!("expected stage1.out weight+bias for round {r}, zeroed {n}"))?;
    }
    let mut compared = 0;
    for seed in 0..3u64 {
        let s = e2s(synth::generate_sample::<f64>(seed, 64))?;
        let img = s.image.reshape(&[1, 3, 64, 64]).unwrap();
        for mode in [PromptMode::Box, PromptMode::Points { k: 3 }, PromptMode::CoarseMask] {
            let p = e2s(synth::sample_prompts(&s.mask, seed, mode))?;
            let (s1, m1) = e2s(model.predict(&img, std::slice::from_ref(&p), true))?;
            let (s0, m0) = e2s(model.predict(&img, &[p], false))?;
            ensure(s1.to_le_bytes() == s0.to_le_bytes(), format!("seg differs (seed {seed}, {mode:?})"))?;
            ensure(m1.to_le_bytes() == m0.to_le_bytes(), format!("matte differs (seed {seed}, {mode:?})"))?;
            compared += s1.len() + m1.len();
        }
    }
    Ok(format!("9 forward pairs, {compared} output values bit-identical to the plain decoder"))
}

// ---------------------------------------------------------------- 7

fn criterion_overfit() -> Outcome {
    const SEG_MAE: f64 = 0.05;
    const SAD_PER_PIXEL: f64 = 0.05;
    const SEG_BCE: f64 = 0.1;
    const LOSS_RATIO: f64 = 0.25;
    let cfg = TrainConfig {
        dataset_size: 1,
        batch_size: 1,
        max_steps: 500,
        lr: 5e-4,
        prompt_modes: vec![PromptMode::Box],
        ..Default::default()
    };
    let res = cfg.output_resolution;
    let start = Instant::now();
    let mut t: Trainer = e2s(Trainer::new(cfg))?;
    let logs = e2s(t.run::<std::io::Sink>(None))?;
    let took = start.elapsed();

    let s = t.samples().next().unwrap().clone();
    let p = e2s(synth::sample_prompts(&s.mask, 0, PromptMode::Box))?;
    let (seg, matte) = e2s(t.model.predict(&s.image.reshape(&[1, 3, 64, 64]).unwrap(), &[p], true))?;
    let up = |x: &Tensor| Plane::from_tensor(&segmatte::tensor::ops::bilinear_resize(x, res, res).unwrap()).unwrap();
    let (mask, alpha) = (up(&s.mask), up(&s.alpha));
    let mae = e2s(metrics::mae(&Plane::from_tensor(&seg).unwrap(), &mask))?;
    let sad = e2s(metrics::matting_errors(&Plane::from_tensor(&matte).unwrap(), &alpha))?.sad_raw / (res * res) as f64;
    let initial = (logs[0].loss.total + logs[1].loss.total) / 2.0;
    let n = logs.len();
    let last = (logs[n - 2].loss.total + logs[n - 1].loss.total) / 2.0;
    let last_bce = logs.iter().rev().find(|l| l.task == Task::Seg).unwrap().loss.bce;
    let detail = format!(
        "{n} steps in {:.0}s: seg MAE {mae:.4} (<{SEG_MAE}), matte SAD/N {sad:.4} (<{SAD_PER_PIXEL}), seg BCE {last_bce:.4} (<{SEG_BCE}), loss {initial:.3} -> {last:.3} ({:.1}% of initial)",
        took.as_secs_f64(),
        100.0 * last / initial
    );
    ensure(mae < SEG_MAE, format!("seg MAE over by {:.4}: {detail}", mae - SEG_MAE))?;
    ensure(sad < SAD_PER_PIXEL, format!("SAD/N over by {:.4}: {detail}", sad - SAD_PER_PIXEL))?;
    ensure(last_bce < SEG_BCE, format!("BCE over: {detail}"))?;
    ensure(last < LOSS_RATIO * initial, format!("loss did not fall below 25%: {detail}"))?;
    ensure(took < Duration::from_secs(300), format!("over 5 minutes: {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------- 8

fn criterion_determinism() -> Outcome {
    let cfg = TrainConfig { dataset_size: 3, max_steps: 6, output_resolution: 64, seed: 4, ..Default::default() };
    let mut logs = vec![];
    for _ in 0..2 {
        let mut buf = Vec::new();
        let mut t: Trainer = e2s(Trainer::new(cfg.clone()))?;
        e2s(t.run(Some(&mut buf)))?;
        logs.push(buf);
    }
    ensure(logs[0] == logs[1], "training logs differ between identical runs")?;
    ensure(!logs[0].is_empty(), "empty training log")?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (pd, gd) = (dir.path().join("pred"), dir.path().join("gt"));
    std::fs::create_dir_all(&pd).unwrap();
    std::fs::create_dir_all(&gd).unwrap();
    for seed in 0..3 {
        let s = e2s(synth::generate_sample::<f64>(seed, 32))?;
        let c = e2s(synth::sample_prompts(&s.mask, seed, PromptMode::CoarseMask))?.coarse_mask.unwrap();
        e2s(segmatte::io::write_gray(gd.join(format!("{seed}.png")), &s.alpha))?;
        e2s(segmatte::io::write_gray(pd.join(format!("{seed}.png")), &c))?;
    }
    let mut reports = vec![];
    for task in [Task::Seg, Task::Seg, Task::Matte, Task::Matte] {
        let r = e2s(segmatte::io::evaluate_dirs(&pd, &gd, task))?;
        let mut csv = Vec::new();
        e2s(r.write_csv(&mut csv))?;
        reports.push((e2s(r.to_json())?, csv));
    }
    ensure(reports[0] == reports[1] && reports[2] == reports[3], "evaluation reports differ between runs")?;
    Ok(format!("train JSONL ({} bytes) and seg/matte eval JSON+CSV byte-identical across runs", logs[0].len()))
}

// ---------------------------------------------------------------- 9

fn half_ulp(x: f64) -> f64 {
    let a = x.abs();
    if a == 0.0 {
        return f64::from_bits(1) / 2.0;
    }
    (f64::from_bits(a.to_bits() + 1) - a) / 2.0
}

fn criterion_invariants() -> Outcome {
    let model: Model = e2s(Model::init(e2s(ModelConfig::new(64, EncoderConfig::default(), 64))?, 13))?;
    let (mut elems, mut rows, mut worst_row) = (0usize, 0usize, 0.0f64);
    let mut check_rows = |t: &Tensor, what: &str| -> std::result::Result<(), String> {
        let n = *t.shape().last().unwrap();
        for r in t.data().chunks(n) {
            let d = (r.iter().sum::<f64>() - 1.0).abs();
            worst_row = worst_row.max(d);
            rows += 1;
            ensure(d <= 1e-9, format!("{what} softmax row sums to 1{d:+e}"))?;
        }
        Ok(())
    };
    for seed in 0..4u64 {
        let s = e2s(synth::generate_sample::<f64>(seed, 64))?;
        let enc = e2s(model.encode(&s.image.reshape(&[1, 3, 64, 64]).unwrap()))?;
        let mode = [PromptMode::Box, PromptMode::Points { k: 2 }, PromptMode::NoisyBox, PromptMode::CoarseMask][seed as usize];
        let p = e2s(synth::sample_prompts(&s.mask, seed, mode))?;
        let mut cx = Ctx::inference(&model.store);
        let out = e2s(model.forward(&mut cx, &enc, &[p], &[Task::Seg, Task::Matte], true))?;
        let dec = &out.decoded[0];
        ensure(dec.rounds.len() == adapter::ROUNDS, "adapter did not run every round")?;
        for st in &dec.rounds {
            let (f, c, o) = (cx.g.value(st.f_out), cx.g.value(st.conf), cx.g.value(st.output));
            for ((&f, &c), &o) in f.data().iter().zip(c.data()).zip(o.data()) {
                ensure(o.to_bits() == (f + c).to_bits(), "F'_out is not fl(F_out + C)")?;
                let resid = ((o - f) - c).abs();
                ensure(resid <= half_ulp(o) + half_ulp(o - f), format!("(F'_out - F_out) - C = {resid:e}"))?;
                elems += 1;
            }
        }
        for a in out.localized.iter().flat_map(|l| l.attention.iter()).chain(dec.stages.iter().flat_map(|s| [&s.stage1, &s.stage2])) {
            for &w in &a.weights {
                check_rows(cx.g.value(w), "attention")?;
            }
        }
    }
    // softmax rows under large logits
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for scale in [1.0, 30.0, 300.0] {
        let x = uniform(&[16, 12], -scale, scale, &mut rng);
        check_rows(&segmatte::tensor::ops::softmax(&x, 1).unwrap(), "raw")?;
    }
    // uniform values: every query returns the common value row
    let mut worst_uniform = 0.0f64;
    for seed in 0..20u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let c: Vec<f64> = (0..8).map(|_| r.gen_range(-2.0..2.0)).collect();
        let mut g = Graph::inference();
        let q = g.constant(uniform(&[5, 8], -3.0, 3.0, &mut r));
        let k = g.constant(uniform(&[7, 8], -3.0, 3.0, &mut r));
        let v = g.constant(Tensor::from_fn(&[7, 8], |i| c[i % 8]).unwrap());
        let out = e2s(nn::attention_core(&mut g, q, k, v, [1, 2, 4][seed as usize % 3]))?.output;
        for (i, &y) in g.value(out).data().iter().enumerate() {
            worst_uniform = worst_uniform.max((y - c[i % 8]).abs());
        }
    }
    ensure(worst_uniform <= 1e-12, format!("uniform-value attention off by {worst_uniform:e}"))?;
    Ok(format!(
        "confidence fuse bit-exact on {elems} elements over 8 fused rounds; {rows} softmax rows max dev {worst_row:.1e}; uniform attention max dev {worst_uniform:.1e}"
    ))
}

// ----------------------------------------------------------------

fn run(f: fn() -> Outcome) -> (Outcome, Duration) {
    let start = Instant::now();
    let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    (r, start.elapsed())
}

fn main() {
    // training for the overfit check runs on its own thread (single core)
    let overfit = std::thread::spawn(|| run(criterion_overfit));
    let criteria: [Criterion; 8] = [
        (1, "gradient suite", criterion_gradients),
        (2, "compositing law", criterion_compositing),
        (3, "metric oracle equivalence", criterion_metric_oracles),
        (4, "freeze policy", criterion_freeze),
        (5, "shape laws", criterion_shapes),
        (6, "zero-adapter equivalence", criterion_zero_adapter),
        (8, "determinism", criterion_determinism),
        (9, "residual/attention invariants", criterion_invariants),
    ];
    let mut results: Vec<(u8, &str, Outcome, Duration)> =
        criteria.iter().map(|&(n, name, f)| {
            let (r, d) = run(f);
            (n, name, r, d)
        }).collect();
    let (r, d) = overfit.join().expect("overfit thread");
    results.push((7, "overfit smoke test", r, d));
    results.sort_by_key(|r| r.0);

    let mut failed = 0;
    println!();
    for (n, name, r, d) in &results {
        match r {
            Ok(detail) => println!("criterion {n} PASS  {name} [{:.1}s]: {detail}", d.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("criterion {n} FAIL  {name} [{:.1}s]: {why}", d.as_secs_f64());
            }
        }
    }
    println!("\nacceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
