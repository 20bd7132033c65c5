//! Brute-force reference computations, each checked against the library on
//! many seeded small instances. Every check returns the number of instances
//! it ran or a description of the first disagreement.

use astcaps_core::capsules::{self, RelationshipConfig};
use astcaps_core::data::{resize_bilinear, skeleton_windows};
use astcaps_core::decision::{bayes_fit, bayes_predict, margin_loss, Vote, HEADS};
use astcaps_core::memory::{cell_step, GruBaselineParams, MemoryCellParams, RecurrentParams};
use astcaps_core::metrics::{auc, roc_curve};
use astcaps_core::params::{AdamConfig, OptimizerState, ParamSet};
use astcaps_core::spatiotemporal::{conv_feature_map, ConvParams, WindowLayout};
use astcaps_core::tensor::conv2d;
use astcaps_core::{MarginParams, Rng, Tensor};

pub type Check = Result<usize, String>;

pub const INSTANCES: usize = 120;

fn close(what: &str, case: usize, got: f64, want: f64, tol: f64) -> Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{what} case {case}: got {got:e}, oracle {want:e}"))
    }
}

fn rand_vec(rng: &mut Rng, n: usize, b: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(-b, b)).collect()
}

fn sig(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Direct nested-loop cross-correlation.
pub fn conv() -> Check {
    let mut rng = Rng::new(101);
    for case in 0..INSTANCES {
        let (c, h, w) = (1 + rng.below(3), 3 + rng.below(5), 3 + rng.below(5));
        let (f, kh, kw) = (1 + rng.below(3), 1 + rng.below(h), 1 + rng.below(w));
        let x = rand_vec(&mut rng, c * h * w, 1.0);
        let k = rand_vec(&mut rng, f * c * kh * kw, 1.0);
        let b = rand_vec(&mut rng, f, 1.0);
        let got = conv2d(
            &Tensor::new(vec![c, h, w], x.clone()).unwrap(),
            &Tensor::new(vec![f, c, kh, kw], k.clone()).unwrap(),
            &Tensor::new(vec![f], b.clone()).unwrap(),
        )
        .map_err(|e| e.to_string())?;
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        if got.shape() != [f, oh, ow] {
            return Err(format!("conv case {case}: shape {:?}", got.shape()));
        }
        for fi in 0..f {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                acc += x[ci * h * w + (i + u) * w + (j + v)] * k[((fi * c + ci) * kh + u) * kw + v];
                            }
                        }
                    }
                    close("conv", case, got.data()[(fi * oh + i) * ow + j], acc + b[fi], 1e-12)?;
                }
            }
        }
        if c == 1 {
            let p = ConvParams {
                kernels: Tensor::new(vec![f, 1, kh, kw], k.clone()).unwrap(),
                bias: Tensor::new(vec![f], b.clone()).unwrap(),
            };
            let map = conv_feature_map(&Tensor::new(vec![1, h, w], x.clone()).unwrap(), &p).unwrap();
            for (m, g) in map.data().iter().zip(got.data()) {
                close("conv sigmoid", case, *m, sig(*g), 1e-15)?;
            }
        }
    }
    Ok(INSTANCES)
}

fn matvec(w: &[f64], cols: usize, v: &[f64], b: &[f64]) -> Vec<f64> {
    b.iter()
        .enumerate()
        .map(|(i, bi)| (0..cols).map(|j| w[i * cols + j] * v[j]).sum::<f64>() + bi)
        .collect()
}

/// Scalar step of the memory cell with hidden width 3 and input width 2.
pub fn cell() -> Check {
    let (hn, xn) = (3, 2);
    let cols = hn + xn;
    let mut rng = Rng::new(202);
    for case in 0..INSTANCES {
        let t = |rng: &mut Rng, n: usize| rand_vec(rng, n, 1.5);
        let (wz, wr, wh, wc) = (t(&mut rng, hn * cols), t(&mut rng, hn * cols), t(&mut rng, hn * cols), t(&mut rng, hn * cols));
        let (bz, br, bh, bc) = (t(&mut rng, hn), t(&mut rng, hn), t(&mut rng, hn), t(&mut rng, hn));
        let o = t(&mut rng, hn);
        let x = t(&mut rng, xn);

        let joined: Vec<f64> = o.iter().chain(&x).copied().collect();
        let z: Vec<f64> = matvec(&wz, cols, &joined, &bz).into_iter().map(sig).collect();
        let r: Vec<f64> = matvec(&wr, cols, &joined, &br).into_iter().map(sig).collect();
        let reset: Vec<f64> = (0..hn).map(|i| r[i] * o[i]).chain(x.iter().copied()).collect();
        let ht: Vec<f64> = matvec(&wh, cols, &reset, &bh).into_iter().map(f64::tanh).collect();
        let c: Vec<f64> = (0..hn).map(|i| (1.0 - z[i]) * ht[i] + z[i] * o[i]).collect();
        let ct: Vec<f64> = matvec(&wc, cols, &joined, &bc).into_iter().map(f64::tanh).collect();
        let out: Vec<f64> = (0..hn).map(|i| c[i] * sig(ct[i])).collect();

        let m = |v: &[f64]| Tensor::matrix(hn, cols, v).unwrap();
        let vct = |v: &[f64]| Tensor::vector(v).unwrap();
        let gru = GruBaselineParams {
            w_z: m(&wz),
            w_r: m(&wr),
            w_h: m(&wh),
            b_z: vct(&bz),
            b_r: vct(&br),
            b_h: vct(&bh),
        };
        let mem = RecurrentParams::Memory(MemoryCellParams {
            gru: gru.clone(),
            w_ctemp: m(&wc),
            b_ctemp: vct(&bc),
        });
        let s = cell_step(&mem, &vct(&o), &vct(&x)).map_err(|e| e.to_string())?;
        let g = cell_step(&RecurrentParams::Gru(gru), &vct(&o), &vct(&x)).map_err(|e| e.to_string())?;
        for i in 0..hn {
            close("cell z", case, s.z.data()[i], z[i], 1e-12)?;
            close("cell r", case, s.r.data()[i], r[i], 1e-12)?;
            close("cell h", case, s.h_tilde.data()[i], ht[i], 1e-12)?;
            close("cell c", case, s.c.data()[i], c[i], 1e-12)?;
            close("cell ctemp", case, s.ctemp.as_ref().unwrap().data()[i], ct[i], 1e-12)?;
            close("cell output", case, s.output.data()[i], out[i], 1e-12)?;
            close("gru output", case, g.output.data()[i], c[i], 1e-12)?;
        }
    }
    Ok(INSTANCES)
}

fn squash_ref(s: &[f64]) -> Vec<f64> {
    let n2: f64 = s.iter().map(|v| v * v).sum();
    if n2 == 0.0 {
        return vec![0.0; s.len()];
    }
    let n = n2.sqrt();
    s.iter().map(|v| n2 / (1.0 + n2) * v / n).collect()
}

/// Routing by agreement written out step by step.
pub fn routing() -> Check {
    let mut rng = Rng::new(303);
    for case in 0..INSTANCES {
        let (p, j, d, iters) = (1 + rng.below(6), 1 + rng.below(4), 1 + rng.below(5), 1 + rng.below(4));
        let u = rand_vec(&mut rng, p * j * d, 1.0);
        let at = |i: usize, jj: usize, k: usize| u[(i * j + jj) * d + k];
        let mut b = vec![vec![0.0; j]; p];
        let mut v = vec![vec![0.0; d]; j];
        let mut history = Vec::new();
        for it in 0..iters {
            let c: Vec<Vec<f64>> = b
                .iter()
                .map(|row| {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    e.iter().map(|x| x / z).collect()
                })
                .collect();
            for (jj, vj) in v.iter_mut().enumerate() {
                let s: Vec<f64> = (0..d).map(|k| (0..p).map(|i| c[i][jj] * at(i, jj, k)).sum()).collect();
                *vj = squash_ref(&s);
            }
            if it + 1 < iters {
                for (i, row) in b.iter_mut().enumerate() {
                    for (jj, bij) in row.iter_mut().enumerate() {
                        *bij += (0..d).map(|k| v[jj][k] * at(i, jj, k)).sum::<f64>();
                    }
                }
            }
            history.push(c);
        }
        let (out, state) = capsules::route(&Tensor::new(vec![p, j, d], u.clone()).unwrap(), iters).unwrap();
        for jj in 0..j {
            for k in 0..d {
                close("routing v", case, out.data()[jj * d + k], v[jj][k], 1e-12)?;
            }
        }
        if state.history.len() != iters {
            return Err(format!("routing case {case}: {} couplings recorded", state.history.len()));
        }
        for (h, c) in state.history.iter().zip(&history) {
            for i in 0..p {
                for jj in 0..j {
                    close("routing c", case, h.data()[i * j + jj], c[i][jj], 1e-12)?;
                }
            }
        }
    }
    Ok(INSTANCES)
}

/// `Σ_k T_k max(0, m+ - |v_k|)² + λ (1 - T_k) max(0, |v_k| - m-)²`
pub fn margin() -> Check {
    let mut rng = Rng::new(404);
    for case in 0..INSTANCES {
        let (n, d) = (2 + rng.below(5), 1 + rng.below(6));
        let scale = rng.uniform(0.05, 1.0);
        let v = rand_vec(&mut rng, n * d, scale);
        let label = rng.below(n);
        let mp = MarginParams {
            m_plus: rng.uniform(0.6, 0.95),
            m_minus: rng.uniform(0.05, 0.4),
            lambda: rng.uniform(0.1, 1.0),
        };
        let mut want = 0.0;
        for k in 0..n {
            let len = v[k * d..(k + 1) * d].iter().map(|x| x * x).sum::<f64>().sqrt();
            let t = if k == label { 1.0 } else { 0.0 };
            want += t * f64::max(0.0, mp.m_plus - len).powi(2) + mp.lambda * (1.0 - t) * f64::max(0.0, len - mp.m_minus).powi(2);
        }
        let got = margin_loss(&Tensor::new(vec![n, d], v).unwrap(), label, &mp).unwrap();
        close("margin", case, got, want, 1e-12)?;
    }
    Ok(INSTANCES)
}

/// Counting fit and direct posterior product on 20 votes over 3 classes.
pub fn bayes() -> Check {
    let (n, alpha) = (3usize, 1.0);
    let mut rng = Rng::new(505);
    for case in 0..INSTANCES {
        let votes: Vec<Vote> = (0..20)
            .map(|_| {
                let label = rng.below(n);
                let mut heads = [0; HEADS];
                for h in heads.iter_mut() {
                    *h = if rng.uniform(0.0, 1.0) < 0.6 { label } else { rng.below(n) };
                }
                Vote { heads, label }
            })
            .collect();
        let m = bayes_fit(&votes, n, alpha).unwrap();
        for c in 0..n {
            let nc = votes.iter().filter(|v| v.label == c).count() as f64;
            close("bayes prior", case, m.prior[c], (nc + alpha) / (20.0 + alpha * n as f64), 1e-15)?;
            for k in 0..HEADS {
                for l in 0..n {
                    let hits = votes.iter().filter(|v| v.label == c && v.heads[k] == l).count() as f64;
                    close("bayes conditional", case, m.conditionals[k][c][l], (hits + alpha) / (nc + alpha * n as f64), 1e-15)?;
                }
            }
        }
        let x = [rng.below(n), rng.below(n), rng.below(n), rng.below(n)];
        let joint: Vec<f64> = (0..n)
            .map(|c| m.prior[c] * (0..HEADS).map(|k| m.conditionals[k][c][x[k]]).product::<f64>())
            .collect();
        let z: f64 = joint.iter().sum();
        let (pred, post) = bayes_predict(&m, &x).unwrap();
        for c in 0..n {
            close("bayes posterior", case, post[c], joint[c] / z, 1e-12)?;
        }
        let best = (0..n).fold(0, |b, c| if joint[c] > joint[b] { c } else { b });
        if (joint[best] - joint[pred]).abs() > 1e-15 * z {
            return Err(format!("bayes case {case}: predicted {pred}, oracle {best}"));
        }
    }
    Ok(INSTANCES)
}

/// Fraction of positive/negative pairs ranked correctly, ties counting half.
pub fn pairwise_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &pi) in positive.iter().enumerate() {
        for (j, &pj) in positive.iter().enumerate() {
            if pi && !pj {
                pairs += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / pairs
}

pub fn auc_pairs() -> Check {
    // 6 points: 3 positive scores 0.9, 0.6, 0.4 against negatives 0.7, 0.4, 0.1.
    // Correct pairs: 0.9 beats all 3, 0.6 beats 0.4 and 0.1, 0.4 beats 0.1 and ties 0.4.
    let s = [0.9, 0.7, 0.6, 0.4, 0.4, 0.1];
    let p = [true, false, true, true, false, false];
    let got = auc(&roc_curve(&s, &p).unwrap());
    close("auc six-point", 0, got, 6.5 / 9.0, 1e-15)?;
    let mut rng = Rng::new(606);
    for case in 0..INSTANCES {
        let n = 2 + rng.below(30);
        let mut pos: Vec<bool> = (0..n).map(|_| rng.uniform(0.0, 1.0) < 0.4).collect();
        pos[0] = true;
        pos[1] = false;
        // Coarse scores so ties are common.
        let scores: Vec<f64> = (0..n).map(|_| rng.below(6) as f64 / 5.0).collect();
        let got = auc(&roc_curve(&scores, &pos).unwrap());
        close("auc", case, got, pairwise_auc(&scores, &pos), 1e-12)?;
    }
    Ok(INSTANCES + 1)
}

/// Bilinear resampling: a 100x100 checkerboard halves to flat 0.5, and random
/// images match the pixel-center formula evaluated independently.
pub fn bilinear() -> Check {
    let board: Vec<f64> = (0..100 * 100).map(|i| if (i / 100 + i % 100) % 2 == 0 { 255.0 } else { 0.0 }).collect();
    let out = resize_bilinear(&board, 100, 100, 50, 50);
    for (i, v) in out.iter().enumerate() {
        close("checkerboard", i, v / 255.0, 0.5, 1e-15)?;
    }
    let same = resize_bilinear(&board, 100, 100, 100, 100);
    if same != board {
        return Err("identity resize changed pixels".into());
    }
    let mut rng = Rng::new(707);
    for case in 0..INSTANCES {
        let (h, w, oh, ow) = (1 + rng.below(9), 1 + rng.below(9), 1 + rng.below(9), 1 + rng.below(9));
        let src = rand_vec(&mut rng, h * w, 100.0);
        let got = resize_bilinear(&src, h, w, oh, ow);
        let px = |y: i64, x: i64| src[(y.clamp(0, h as i64 - 1) as usize) * w + x.clamp(0, w as i64 - 1) as usize];
        for y in 0..oh {
            for x in 0..ow {
                let sy = ((y as f64 + 0.5) * h as f64 / oh as f64 - 0.5).max(0.0).min((h - 1) as f64);
                let sx = ((x as f64 + 0.5) * w as f64 / ow as f64 - 0.5).max(0.0).min((w - 1) as f64);
                let (y0, x0) = (sy.floor() as i64, sx.floor() as i64);
                let (dy, dx) = (sy - y0 as f64, sx - x0 as f64);
                let want = px(y0, x0) * (1.0 - dy) * (1.0 - dx)
                    + px(y0, x0 + 1) * (1.0 - dy) * dx
                    + px(y0 + 1, x0) * dy * (1.0 - dx)
                    + px(y0 + 1, x0 + 1) * dy * dx;
                close("bilinear", case, got[y * ow + x], want, 1e-10)?;
            }
        }
    }
    Ok(INSTANCES + 1)
}

/// Skeleton windows against manual slicing of the frame table.
pub fn skeleton() -> Check {
    let mut rng = Rng::new(808);
    let path = std::path::Path::new("seeded.csv");
    for case in 0..INSTANCES {
        let rows = [3, 9, 21, 63][case % 4];
        let cols = 1 + rng.below(8);
        let frames: Vec<Vec<f64>> = (0..cols * 2 + rng.below(cols)).map(|_| rand_vec(&mut rng, 63, 2.0)).collect();
        let layout = WindowLayout::new(rows, cols);
        let got = skeleton_windows(path, &frames, layout, 1).map_err(|e| e.to_string())?;
        let expect_windows = frames.len() / cols;
        if got.len() != expect_windows {
            return Err(format!("skeleton case {case}: {} windows, expected {expect_windows}", got.len()));
        }
        let per_group = 21 / (rows / 3);
        for (wi, win) in got.iter().enumerate() {
            let mut raw = vec![0.0; rows * cols];
            for (t, frame) in frames[wi * cols..(wi + 1) * cols].iter().enumerate() {
                for g in 0..rows / 3 {
                    for axis in 0..3 {
                        let joints = &frame[g * per_group * 3..(g + 1) * per_group * 3];
                        let mean = joints.iter().skip(axis).step_by(3).sum::<f64>() / per_group as f64;
                        raw[(g * 3 + axis) * cols + t] = mean;
                    }
                }
            }
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (k, (a, b)) in win.features.data().iter().zip(&raw).enumerate() {
                close("skeleton", case * 1000 + k, *a, b / norm, 1e-12)?;
            }
        }
    }
    Ok(INSTANCES)
}

/// Scalar Adam over several steps against the textbook update.
pub fn adam() -> Check {
    let mut rng = Rng::new(909);
    for case in 0..INSTANCES {
        let cfg = AdamConfig {
            lr: rng.uniform(1e-4, 1e-1),
            beta1: rng.uniform(0.5, 0.95),
            beta2: rng.uniform(0.9, 0.9999),
            eps: 1e-8,
        };
        let mut theta = rng.uniform(-1.0, 1.0);
        let mut params = ParamSet::new();
        params.insert("p", Tensor::vector(&[theta]).unwrap());
        let mut state = OptimizerState::new(cfg, &params);
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=5 {
            let g = rng.uniform(-2.0, 2.0);
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            theta -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            let grads = [("p".to_string(), Tensor::vector(&[g]).unwrap())].into_iter().collect();
            state.adam_step(&mut params, &grads).map_err(|e| e.to_string())?;
            close("adam", case, params.require("p").unwrap().data()[0], theta, 1e-12)?;
        }
    }
    Ok(INSTANCES)
}

/// Each transfer matrix maps the next lifted capsule onto the current one:
/// `R lift(u_{k+1}) ≈ lift(u_k)`.
pub fn relationship() -> Check {
    let mut rng = Rng::new(1010);
    let cfg = RelationshipConfig::default();
    for case in 0..INSTANCES {
        let (p, d) = (2 + rng.below(5), 1 + rng.below(4));
        let u = rand_vec(&mut rng, p * d, 1.0);
        let set = capsules::relationship_matrices(&Tensor::new(vec![p, d], u.clone()).unwrap(), &cfg).unwrap();
        let flat = set.flatten();
        let pairs = cfg.pairs(p);
        if flat.len() != pairs * d * d {
            return Err(format!("relationship case {case}: {} values for {pairs} pairs", flat.len()));
        }
        for k in 0..pairs {
            let lift = |c: usize| {
                let v = &u[c * d..(c + 1) * d];
                (0..d * d)
                    .map(|i| v[i / d] * v[i % d] + if i / d == i % d { cfg.lift_eps } else { 0.0 })
                    .collect::<Vec<f64>>()
            };
            let (a, b) = (lift(k), lift(k + 1));
            let r = &flat.data()[k * d * d..(k + 1) * d * d];
            for i in 0..d {
                for j in 0..d {
                    let rb: f64 = (0..d).map(|t| r[i * d + t] * b[t * d + j]).sum();
                    close("relationship", case, rb, a[i * d + j], 1e-4)?;
                }
            }
        }
    }
    Ok(INSTANCES)
}

/// All oracle checks by name.
pub fn all() -> Vec<(&'static str, Check)> {
    vec![
        ("conv", conv()),
        ("cell_step", cell()),
        ("routing_schedule", routing()),
        ("margin_loss", margin()),
        ("bayes", bayes()),
        ("auc", auc_pairs()),
        ("bilinear", bilinear()),
        ("skeleton", skeleton()),
        ("adam", adam()),
        ("relationship", relationship()),
    ]
}
