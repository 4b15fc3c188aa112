//! Shared oracles: central finite differences and brute-force references.
#![allow(dead_code)]

use dtnerf::diffusion::{diffusion_loss, DenoiserNet, LatentProjector, NoiseSchedule, Objective};
use dtnerf::geom::Vec3;
use dtnerf::harness::total_loss;
use dtnerf::numerics::{Graph, ParamStore, PrngState, Tensor, Var};
use dtnerf::renderer::{composite, render_loss, FieldNet, RenderConfig};
use dtnerf::scene::{PointCloud, Ray};
use dtnerf::transformer::{AttentionConfig, LayerWeights, Transformer};
use dtnerf::Result;

pub const GRAD_TOL: f64 = 1e-4;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`; zero when both vanish.
pub fn norm_rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn step(x: f64) -> f64 {
    1e-6 * x.abs().max(1.0)
}

pub fn random(rng: &mut PrngState, shape: &[usize]) -> Tensor {
    rng.normal(shape)
}

/// Random shape of the given rank with extents in `1..=max`.
pub fn random_shape(rng: &mut PrngState, rank: usize, max: usize) -> Vec<usize> {
    (0..rank).map(|_| 1 + rng.below(max)).collect()
}

type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

/// Norm-wise relative error between backprop and central differences of
/// `Σ w ⊙ f(inputs)` with random fixed weights `w`, over all inputs jointly.
pub fn input_grad_error(inputs: &[Tensor], f: &Build, rng: &mut PrngState) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars).expect("forward");
    let w = rng.normal(g.shape(out));
    let loss = weighted_sum(&mut g, out, &w);
    let grads = g.backward(loss).expect("backward");
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let vs: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vs).expect("forward");
        let l = weighted_sum(&mut g, out, &w);
        g.value(l).item()
    };
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (i, v) in vars.iter().enumerate() {
        analytic.extend_from_slice(grads.wrt(*v).data());
        for j in 0..inputs[i].len() {
            let mut xs = inputs.to_vec();
            let x0 = inputs[i].data()[j];
            let h = step(x0);
            xs[i].data_mut()[j] = x0 + h;
            let up = eval(&xs);
            xs[i].data_mut()[j] = x0 - h;
            let down = eval(&xs);
            numeric.push((up - down) / (2.0 * h));
        }
    }
    norm_rel_err(&analytic, &numeric)
}

fn weighted_sum(g: &mut Graph, out: Var, w: &Tensor) -> Var {
    let wc = g.constant(w.clone());
    let p = g.mul(out, wc).expect("weights match output");
    g.sum(p)
}

/// Same check over every tensor of `store` jointly, for a scalar-valued `f`.
pub fn param_grad_error(store: &ParamStore, f: &dyn Fn(&mut Graph, &ParamStore) -> Result<Var>) -> f64 {
    let mut g = Graph::new();
    let loss = f(&mut g, store).expect("forward");
    let analytic = g.backward(loss).expect("backward").for_params(store);
    let eval = |s: &ParamStore| {
        let mut g = Graph::new();
        let l = f(&mut g, s).expect("forward");
        g.value(l).item()
    };
    let analytic: Vec<f64> = analytic.iter().flat_map(|t| t.data().to_vec()).collect();
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = store.clone();
    for id in store.ids() {
        for j in 0..store.get(id).len() {
            let x0 = store.get(id).data()[j];
            let h = step(x0);
            work.get_mut(id).data_mut()[j] = x0 + h;
            let up = eval(&work);
            work.get_mut(id).data_mut()[j] = x0 - h;
            let down = eval(&work);
            work.get_mut(id).data_mut()[j] = x0;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    norm_rel_err(&analytic, &numeric)
}

pub struct GradCase {
    pub name: &'static str,
    pub configs: usize,
    pub worst: f64,
}

fn case(name: &'static str, configs: usize, mut run: impl FnMut(usize, &mut PrngState) -> f64) -> GradCase {
    let mut rng = PrngState::derive(0x6AD, name.len() as u64 * 7919 + name.as_bytes()[0] as u64);
    let worst = (0..configs).map(|c| run(c, &mut rng)).fold(0.0, f64::max);
    GradCase { name, configs, worst }
}

/// Replaces zero-initialized biases, which put dead ReLU units exactly on
/// the kink, with draws of the same scale as the weights.
fn jitter_params(store: &mut ParamStore, rng: &mut PrngState) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let noise = rng.normal(store.get(id).shape());
        for (v, n) in store.get_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *v += 0.3 * n;
        }
    }
}

/// Away from ReLU's kink.
fn off_zero(t: Tensor) -> Tensor {
    t.map(|v| if v.abs() < 1e-3 { v + 0.01f64.copysign(v) } else { v })
}

fn tiny_attention(rng: &mut PrngState) -> AttentionConfig {
    let heads = 1 + rng.below(2);
    AttentionConfig {
        layers: 1 + rng.below(2),
        heads,
        // Layer norm of one or two features is piecewise constant.
        model_dim: if heads == 1 {
            3 + rng.below(2)
        } else {
            2 * (2 + rng.below(2))
        },
        n_freq: 1,
        ffn_dim: 1 + rng.below(4),
    }
}

fn random_rays(rng: &mut PrngState, n: usize) -> Vec<Ray> {
    (0..n)
        .map(|_| {
            let o = Vec3::new(rng.uniform() - 0.5, rng.uniform() - 0.5, 3.0);
            let d = Vec3::new(0.2 * (rng.uniform() - 0.5), 0.2 * (rng.uniform() - 0.5), -1.0).normalized();
            Ray {
                origin: o,
                direction: d,
            }
        })
        .collect()
}

/// Every differentiable operation and composed pipeline.
pub fn gradient_suite(configs: usize) -> Vec<GradCase> {
    let mut out = Vec::new();
    macro_rules! unary {
        ($name:expr, $rank:expr, $prep:expr, $op:expr) => {
            out.push(case($name, configs, |_, rng| {
                let s = random_shape(rng, $rank, 4);
                let x = $prep(random(rng, &s));
                input_grad_error(&[x], &|g, v| $op(g, v[0]), rng)
            }));
        };
    }
    out.push(case("matmul", configs, |_, rng| {
        let (m, k, n) = (1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4));
        let (a, b) = (random(rng, &[m, k]), random(rng, &[k, n]));
        input_grad_error(&[a, b], &|g, v| g.matmul(v[0], v[1]), rng)
    }));
    for (name, exact) in [("batch_matmul", false), ("batch_matmul_exact", true)] {
        out.push(case(name, configs, |_, rng| {
            let (b, m, k, n) = (1 + rng.below(3), 1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4));
            let (x, y) = (random(rng, &[b, m, k]), random(rng, &[b, k, n]));
            input_grad_error(
                &[x, y],
                &|g, v| {
                    if exact {
                        g.batch_matmul_exact(v[0], v[1])
                    } else {
                        g.batch_matmul(v[0], v[1])
                    }
                },
                rng,
            )
        }));
    }
    unary!("transpose_last", 2, |t| t, |g: &mut Graph, x| g.transpose_last(x));
    out.push(case("transpose_last_3d", configs, |_, rng| {
        let s = random_shape(rng, 3, 4);
        input_grad_error(&[random(rng, &s)], &|g, v| g.transpose_last(v[0]), rng)
    }));
    for (name, which) in [("add", 0), ("sub", 1), ("mul", 2)] {
        out.push(case(name, configs, |c, rng| {
            let full = random_shape(rng, 3, 4);
            // Alternate equal shapes, trailing broadcasts and unit-axis broadcasts.
            let other: Vec<usize> = match c % 3 {
                0 => full.clone(),
                1 => full[1..].to_vec(),
                _ => full.iter().map(|&d| if rng.below(2) == 0 { 1 } else { d }).collect(),
            };
            let (a, b) = (random(rng, &full), random(rng, &other));
            let (a, b) = if c % 2 == 0 { (a, b) } else { (b, a) };
            input_grad_error(
                &[a, b],
                &|g, v| match which {
                    0 => g.add(v[0], v[1]),
                    1 => g.sub(v[0], v[1]),
                    _ => g.mul(v[0], v[1]),
                },
                rng,
            )
        }));
    }
    unary!("scale", 2, |t| t, |g: &mut Graph, x| Ok(g.scale(x, -1.7)));
    unary!("add_scalar", 2, |t| t, |g: &mut Graph, x| Ok(g.add_scalar(x, 0.3)));
    unary!("relu", 2, off_zero, |g: &mut Graph, x| Ok(g.relu(x)));
    unary!("softplus", 2, |t: Tensor| t.map(|v| 3.0 * v), |g: &mut Graph, x| Ok(
        g.softplus(x)
    ));
    unary!("sigmoid", 2, |t: Tensor| t.map(|v| 3.0 * v), |g: &mut Graph, x| Ok(
        g.sigmoid(x)
    ));
    unary!("exp", 2, |t| t, |g: &mut Graph, x| Ok(g.exp(x)));
    out.push(case("softmax", configs, |_, rng| {
        let rank = 1 + rng.below(3);
        let s = random_shape(rng, rank, 4);
        let axis = rng.below(rank);
        input_grad_error(&[random(rng, &s).map(|v| 2.0 * v)], &|g, v| g.softmax(v[0], axis), rng)
    }));
    out.push(case("layer_norm", configs, |_, rng| {
        let mut s = random_shape(rng, 2, 4);
        s[1] += 1;
        input_grad_error(&[random(rng, &s)], &|g, v| g.layer_norm(v[0]), rng)
    }));
    out.push(case("concat", configs, |_, rng| {
        let rows = 1 + rng.below(4);
        let count = 1 + rng.below(3);
        let parts: Vec<Tensor> = (0..count)
            .map(|_| {
                let w = 1 + rng.below(3);
                random(rng, &[rows, w])
            })
            .collect();
        input_grad_error(&parts, &|g, v| g.concat(v), rng)
    }));
    out.push(case("slice_last", configs, |_, rng| {
        let s = random_shape(rng, 2, 5);
        let w = s[1];
        let start = rng.below(w);
        let end = start + 1 + rng.below(w - start);
        input_grad_error(&[random(rng, &s)], &|g, v| g.slice_last(v[0], start, end), rng)
    }));
    out.push(case("reshape", configs, |_, rng| {
        let s = random_shape(rng, 2, 4);
        input_grad_error(&[random(rng, &s)], &|g, v| g.reshape(v[0], &[s[1], s[0]]), rng)
    }));
    unary!("sum_last", 3, |t| t, |g: &mut Graph, x| g.sum_last(x));
    unary!("mean_rows", 2, |t| t, |g: &mut Graph, x| g.mean_rows(x));
    unary!("cumsum_exclusive", 2, |t| t, |g: &mut Graph, x| g.cumsum_exclusive(x));
    unary!("mean", 3, |t| t, |g: &mut Graph, x| Ok(g.mean(x)));
    unary!("sum", 3, |t| t, |g: &mut Graph, x| Ok(g.sum(x)));
    unary!("sum_sq", 2, |t| t, |g: &mut Graph, x| g.sum_sq(x, None));
    out.push(case("sum_sq_diff", configs, |_, rng| {
        let s = random_shape(rng, 2, 4);
        let (a, b) = (random(rng, &s), random(rng, &s));
        input_grad_error(&[a, b], &|g, v| g.sum_sq(v[0], Some(v[1])), rng)
    }));

    out.push(case("diffusion_loss", configs, |c, rng| {
        let mut store = ParamStore::new();
        let d = 1 + rng.below(3);
        let objective = if c % 2 == 0 {
            Objective::Sample
        } else {
            Objective::Noise
        };
        let hidden = [1 + rng.below(4)];
        let net = DenoiserNet::new(&mut store, "den", d, &hidden, 10, objective, rng).unwrap();
        let schedule = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let rows = 1 + rng.below(3);
        let x0 = random(rng, &[rows, d]);
        let seed = rng.next_u64();
        param_grad_error(&store, &|g, s| {
            Ok(diffusion_loss(g, &net, s, &x0, &schedule, &mut PrngState::new(seed))?.loss)
        })
    }));
    out.push(case("transformer_forward", configs, |_, rng| {
        let cfg = tiny_attention(rng);
        let mut store = ParamStore::new();
        let t = Transformer::new(&mut store, "tf", cfg, rng).unwrap();
        jitter_params(&mut store, rng);
        let (b, n) = (1 + rng.below(2), 1 + rng.below(4));
        let tokens = random(rng, &[b, n, cfg.model_dim]);
        let w = random(rng, tokens.shape());
        let by_params = param_grad_error(&store, &|g, s| {
            let x = g.constant(tokens.clone());
            let y = t.forward(g, s, x)?;
            Ok(weighted_sum(g, y, &w))
        });
        let by_input = input_grad_error(std::slice::from_ref(&tokens), &|g, v| t.forward(g, &store, v[0]), rng);
        by_params.max(by_input)
    }));
    out.push(case("multi_head", configs, |_, rng| {
        let cfg = tiny_attention(rng);
        let mut store = ParamStore::new();
        let lw = LayerWeights::new(&mut store, "mh", &cfg, rng).unwrap();
        let n = 1 + rng.below(4);
        let m = 1 + rng.below(4);
        let (xq, xkv) = (random(rng, &[n, cfg.model_dim]), random(rng, &[m, cfg.model_dim]));
        input_grad_error(
            &[xq, xkv],
            &|g, v| dtnerf::transformer::multi_head(g, &store, v[0], v[1], &lw),
            rng,
        )
    }));
    out.push(case("field_eval_composite", configs, |c, rng| {
        let cfg = tiny_attention(rng);
        let mut store = ParamStore::new();
        let latent_dim = 1 + rng.below(3);
        let field = FieldNet::new(&mut store, &cfg, latent_dim, 1 + rng.below(5), c % 2 == 0, rng).unwrap();
        jitter_params(&mut store, rng);
        let rcfg = RenderConfig::new(2.0, 4.0, 2 + rng.below(4), [0.2, 0.4, 0.6]).unwrap();
        let nr = 1 + rng.below(3);
        let rays = random_rays(rng, nr);
        let latent = random(rng, &[1, latent_dim]);
        let truth = random(rng, &[rays.len(), 3]).map(|v| 0.5 + 0.2 * v);
        let (pos, _, deltas) = dtnerf::renderer::ray_samples(&rays, &rcfg, None);
        let f = |g: &mut Graph, s: &ParamStore, lat: Var| -> Result<Var> {
            let mut b = field.field_eval(g, s, &pos, rays.len(), rcfg.samples, lat)?;
            b.deltas = deltas.clone();
            let comp = composite(g, &b, rcfg.background)?;
            let l = render_loss(g, comp.rgb, &truth)?;
            let o = g.sum(comp.opacity);
            let o = g.scale(o, 0.1);
            g.add(l, o)
        };
        let by_params = param_grad_error(&store, &|g, s| {
            let lat = g.constant(latent.clone());
            f(g, s, lat)
        });
        let by_latent = input_grad_error(std::slice::from_ref(&latent), &|g, v| f(g, &store, v[0]), rng);
        by_params.max(by_latent)
    }));
    out.push(case("composite", configs, |_, rng| {
        let (r, s) = (1 + rng.below(3), 2 + rng.below(5));
        let sigma = random(rng, &[r, s]).map(|v| v.abs() * 2.0);
        let rgb: Vec<Tensor> = (0..3).map(|_| random(rng, &[r, s]).map(|v| 0.5 + 0.2 * v)).collect();
        let deltas = random(rng, &[r, s]).map(|v| 0.05 + 0.1 * v.abs());
        let bg = [rng.uniform(), rng.uniform(), rng.uniform()];
        let mut inputs = vec![sigma];
        inputs.extend(rgb);
        input_grad_error(
            &inputs,
            &|g, v| {
                let b = dtnerf::renderer::RaySampleBatch {
                    sigma: v[0],
                    rgb: [v[1], v[2], v[3]],
                    deltas: deltas.clone(),
                };
                let c = composite(g, &b, bg)?;
                g.concat(&[c.rgb, c.opacity])
            },
            rng,
        )
    }));
    out.push(case("total_loss", configs, |_, rng| {
        let cfg = tiny_attention(rng);
        let mut store = ParamStore::new();
        let d = 1 + rng.below(3);
        let latent_dim = 1 + rng.below(2);
        let net = DenoiserNet::new(&mut store, "den", d, &[3], 10, Objective::Sample, rng).unwrap();
        let proj = LatentProjector::new(&mut store, "lat", d, latent_dim, rng).unwrap();
        let field = FieldNet::new(&mut store, &cfg, latent_dim, 3, true, rng).unwrap();
        jitter_params(&mut store, rng);
        let schedule = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let x0 = random(rng, &[2, d]);
        let rcfg = RenderConfig::new(2.0, 4.0, 3, [0.1, 0.1, 0.1]).unwrap();
        let rays = random_rays(rng, 2);
        let truth = random(rng, &[2, 3]).map(|v| 0.5 + 0.2 * v);
        let lambda = 0.05 + rng.uniform();
        let seed = rng.next_u64();
        param_grad_error(&store, &|g, s| {
            let mut r = PrngState::new(seed);
            let batch = diffusion_loss(g, &net, s, &x0, &schedule, &mut r)?;
            let lat = proj.extract_latent(g, s, batch.x0_hat)?;
            let (comp, _) = dtnerf::renderer::render_rays(g, s, &field, lat, &rays, &rcfg, Some(&mut r))?;
            let l = render_loss(g, comp.rgb, &truth)?;
            total_loss(g, l, Some(batch.loss), lambda)
        })
    }));
    out
}

// Brute-force metric references, written independently of the library.

pub fn brute_mse(p: &[f64], t: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        let d = p[i] - t[i];
        s += d * d;
    }
    s / p.len() as f64
}

pub fn brute_psnr(p: &[f64], t: &[f64], max: f64) -> f64 {
    let m = brute_mse(p, t);
    if m == 0.0 {
        f64::INFINITY
    } else {
        20.0 * max.log10() - 10.0 * m.log10()
    }
}

pub fn brute_ssim(p: &[f64], t: &[f64], max: f64) -> f64 {
    let n = p.len() as f64;
    let mean = |x: &[f64]| x.iter().fold(0.0, |a, b| a + b) / n;
    let (mx, my) = (mean(p), mean(t));
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut c = 0.0;
    for i in 0..p.len() {
        vx += (p[i] - mx).powi(2) / n;
        vy += (t[i] - my).powi(2) / n;
        c += (p[i] - mx) * (t[i] - my) / n;
    }
    let c1 = (0.01 * max) * (0.01 * max);
    let c2 = (0.03 * max) * (0.03 * max);
    (2.0 * mx * my + c1) / (mx * mx + my * my + c1) * ((2.0 * c + c2) / (vx + vy + c2))
}

pub fn brute_chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
    let dist = |p: Vec3, q: Vec3| ((p.x - q.x).powi(2) + (p.y - q.y).powi(2) + (p.z - q.z).powi(2)).sqrt();
    let side = |x: &PointCloud, y: &PointCloud| {
        let mut total = 0.0;
        for &p in &x.points {
            let mut best = f64::MAX;
            for &q in &y.points {
                best = best.min(dist(p, q));
            }
            total += best;
        }
        total / x.points.len() as f64
    };
    side(a, b) + side(b, a)
}

pub fn brute_fidelity_mae(p: &[f64], t: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        s += if p[i] > t[i] { p[i] - t[i] } else { t[i] - p[i] };
    }
    s / p.len() as f64
}

/// Does `a` match `b` within `tol`, treating equal infinities as equal.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol
}

// Brute-force attention.

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor, rows: usize, cols: usize, offset: usize) -> Mat {
    (0..rows)
        .map(|r| (0..cols).map(|c| t.data()[offset + r * cols + c]).collect())
        .collect()
}

pub fn mat_mul(a: &Mat, b: &Mat) -> Mat {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    out
}

pub fn brute_attention(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let dk = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / dk.sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len())
                .map(|c| e.iter().zip(v).map(|(w, vr)| w / z * vr[c]).sum())
                .collect()
        })
        .collect()
}

/// Reference for one unbatched multi-head block given its stored weights.
pub fn brute_multi_head(store: &ParamStore, w: &LayerWeights, xq: &Mat, xkv: &Mat) -> Mat {
    let get = |id| {
        let t: &Tensor = store.get(id);
        to_mat(t, t.shape()[0], t.shape()[1], 0)
    };
    let mut cat: Mat = vec![Vec::new(); xq.len()];
    for h in &w.heads {
        let q = mat_mul(xq, &get(h.query));
        let k = mat_mul(xkv, &get(h.key));
        let v = mat_mul(xkv, &get(h.value));
        for (row, part) in cat.iter_mut().zip(brute_attention(&q, &k, &v)) {
            row.extend(part);
        }
    }
    mat_mul(&cat, &get(w.output))
}

pub fn max_abs_diff(a: &Mat, b: &[f64]) -> f64 {
    a.iter()
        .flatten()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
