//! Finite-difference checks of every graph op and of the full training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rgbt::assignment_losses::{assign, head_geometry, total_loss, ConsistBranches, ConsistReduction, LossWeights};
use rgbt::degrade::{pseudo_degrade, DegradeParams};
use rgbt::detector::{forward, forward_graph, head_output, Arch, DetectorParams, HeadOutput};
use rgbt::diffengine::{CellTarget, Graph, Live, Reduction, Tensor4, Var};
use rgbt::geometry::Bbox;
use rgbt::synthdata::{normalize_for_net, render_range, ModalityPair, SceneConfig};

const STEP: f64 = 1e-3;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor4 {
    Tensor4::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor4 {
    Tensor4::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Norm-wise relative error of analytic against central-difference gradients,
/// worst over leaves.
pub fn gradcheck(leaves: &[Tensor4], build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.variable(t.clone())).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor4> = vars
        .iter()
        .zip(leaves)
        .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor4::zeros(t.shape())))
        .collect();
    let eval = |ls: &[Tensor4]| {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = ls.iter().map(|t| g.input(t.clone())).collect();
        let l = build(&mut g, &vars);
        g.value(l).data()[0]
    };
    let mut worst: f64 = 0.0;
    for (li, leaf) in leaves.iter().enumerate() {
        let (mut d2, mut a2, mut f2) = (0.0, 0.0, 0.0);
        for k in 0..leaf.len() {
            let mut up = leaves.to_vec();
            up[li].data_mut()[k] += STEP;
            let mut dn = leaves.to_vec();
            dn[li].data_mut()[k] -= STEP;
            let fd = (eval(&up) - eval(&dn)) / (2.0 * STEP);
            let an = analytic[li].data()[k];
            d2 += (fd - an) * (fd - an);
            a2 += an * an;
            f2 += fd * fd;
        }
        worst = worst.max(d2.sqrt() / a2.sqrt().max(f2.sqrt()).max(1e-12));
    }
    worst
}

fn reduce(g: &mut Graph, v: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.value(v).shape());
    g.dot_const(v, w).unwrap()
}

/// Worst relative error per op over a few random shapes.
pub fn op_errors() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Vec::new();
    let mut worst = |name: &'static str, e: f64| match out.iter_mut().find(|(n, _)| *n == name) {
        Some((_, w)) => *w = f64::max(*w, e),
        None => out.push((name, e)),
    };

    for (xs, ws, stride, pad) in [([2, 3, 8, 8], [4, 3, 3, 3], 1, 1), ([1, 2, 7, 6], [3, 2, 3, 3], 2, 1), ([2, 4, 5, 5], [2, 4, 1, 1], 1, 0)] {
        let leaves = vec![rand_tensor(&mut rng, xs), rand_tensor(&mut rng, ws), rand_tensor(&mut rng, [ws[0], 1, 1, 1])];
        worst(
            "conv2d",
            gradcheck(&leaves, |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], stride, pad).unwrap();
                reduce(g, y, 1)
            }),
        );
    }
    for shape in [[1, 2, 3, 3], [2, 3, 2, 4]] {
        let l = vec![rand_tensor(&mut rng, shape).map(|v| 3.0 * v)];
        worst(
            "sigmoid",
            gradcheck(&l, |g, v| {
                let y = g.sigmoid(v[0]);
                reduce(g, y, 2)
            }),
        );
        let l = vec![away_from_zero(&mut rng, shape)];
        worst(
            "leaky",
            gradcheck(&l, |g, v| {
                let y = g.leaky(v[0], 0.1).unwrap();
                reduce(g, y, 3)
            }),
        );
        let mshape = [shape[0], 1, shape[2], shape[3]];
        for bs in [shape, mshape] {
            let l = vec![rand_tensor(&mut rng, shape), rand_tensor(&mut rng, bs)];
            worst(
                "add",
                gradcheck(&l, |g, v| {
                    let y = g.add(v[0], v[1]).unwrap();
                    reduce(g, y, 4)
                }),
            );
            worst(
                "mul",
                gradcheck(&l, |g, v| {
                    let y = g.mul(v[0], v[1]).unwrap();
                    reduce(g, y, 5)
                }),
            );
        }
        let l = vec![rand_tensor(&mut rng, shape)];
        worst(
            "scale",
            gradcheck(&l, |g, v| {
                let y = g.scale(v[0], -1.7);
                reduce(g, y, 6)
            }),
        );
        worst(
            "div_scalar",
            gradcheck(&l, |g, v| {
                let y = g.div_scalar(v[0], 3.0);
                reduce(g, y, 7)
            }),
        );
        worst("dot_const", gradcheck(&l, |g, v| reduce(g, v[0], 8)));
        let l = vec![rand_tensor(&mut rng, shape), rand_tensor(&mut rng, [shape[0], 2, shape[2], shape[3]])];
        worst(
            "concat_channels",
            gradcheck(&l, |g, v| {
                let y = g.concat_channels(&[v[0], v[1]]).unwrap();
                reduce(g, y, 9)
            }),
        );
        let l = vec![rand_tensor(&mut rng, shape)];
        worst(
            "upsample_nearest",
            gradcheck(&l, |g, v| {
                let y = g.upsample_nearest(v[0]);
                reduce(g, y, 10)
            }),
        );
        let target = Tensor4::from_fn(shape, |_| rng.random_range(0.0..=1.0));
        let mask = Tensor4::from_fn(shape, |_| if rng.random_bool(0.6) { 1.0 } else { 0.0 });
        for m in [None, Some(mask)] {
            let l = vec![rand_tensor(&mut rng, shape).map(|v| 3.0 * v)];
            worst("bce_logits", gradcheck(&l, |g, v| g.bce_logits(v[0], target.clone(), m.clone(), Reduction::Mean).unwrap()));
        }
        let other = rand_tensor(&mut rng, shape);
        let l = vec![rand_tensor(&mut rng, shape)];
        worst(
            "l2",
            gradcheck(&l, |g, v| {
                let o = g.input(other.clone());
                g.l2(v[0], o, Live::LeftOnly, Reduction::Mean).unwrap()
            }),
        );
    }
    for shape in [[1, 1, 4, 4], [2, 2, 2, 6]] {
        let n: usize = shape.iter().product();
        let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
        for i in (1..n).rev() {
            vals.swap(i, rng.random_range(0..=i));
        }
        let l = vec![Tensor4::from_vec(shape, vals).unwrap()];
        worst(
            "max_pool2",
            gradcheck(&l, |g, v| {
                let y = g.max_pool2(v[0]).unwrap();
                reduce(g, y, 11)
            }),
        );
    }
    for (n, h, w, stride) in [(1, 3, 4, 8.0), (2, 2, 2, 4.0)] {
        let mut cells = Vec::new();
        for s in 0..n {
            for row in 0..h {
                for col in 0..w {
                    if rng.random_bool(0.6) {
                        let cx = (col as f64 + rng.random_range(0.0..1.0)) * stride;
                        let cy = (row as f64 + rng.random_range(0.0..1.0)) * stride;
                        let bw = rng.random_range(0.5..3.0) * stride;
                        let bh = rng.random_range(0.5..3.0) * stride;
                        cells.push(CellTarget {
                            n: s,
                            row,
                            col,
                            stride,
                            target: Bbox::new(cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0),
                        });
                    }
                }
            }
        }
        let l = vec![rand_tensor(&mut rng, [n, 4, h, w]).map(|v| 0.5 * v)];
        worst("diou_cells", gradcheck(&l, |g, v| g.diou_cells(v[0], cells.clone(), Reduction::Mean).unwrap()));
    }
    out
}

struct Fixture {
    clean: Vec<ModalityPair>,
    degraded: Vec<ModalityPair>,
    base: HeadOutput,
}

fn loss_and_grads(params: &mut DetectorParams, fx: &Fixture, with_grad: bool) -> f64 {
    let refs: Vec<&ModalityPair> = fx.degraded.iter().collect();
    let (r, t) = normalize_for_net(&refs);
    let mut g = if with_grad { Graph::new() } else { Graph::no_grad() };
    let (rv, tv) = (g.input(r), g.input(t));
    let fv = forward_graph(params, &mut g, rv, tv).unwrap();
    let geometry = head_geometry(&head_output(&g, &fv));
    let anns: Vec<&[_]> = fx.clean.iter().map(|p| p.annotations.as_slice()).collect();
    let targets = assign(&anns, &geometry, params.arch.num_classes);
    let lv = total_loss(
        &mut g,
        &fv.levels,
        &targets,
        Some((&fx.base, ConsistBranches::default(), ConsistReduction::Mean)),
        &LossWeights::default(),
    )
    .unwrap();
    let value = g.value(lv.total).data()[0];
    if with_grad {
        g.backward(lv.total).unwrap();
        params.set.zero_grads();
        g.accumulate_param_grads(&mut params.set);
    }
    value
}

/// Checks `dL/dtheta` of the full objective (detection terms plus
/// consistency against a separate base model) for `samples` scalar
/// parameters spread over every tensor. Returns the worst per-parameter
/// relative error and the number of parameters checked.
pub fn end_to_end_error(samples: usize) -> (f64, usize) {
    let arch = Arch::default();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut params = DetectorParams::init(&arch, &mut rng).unwrap();
    let base_params = DetectorParams::init(&arch, &mut rng).unwrap();
    let clean = render_range(&SceneConfig::default(), 0..2);
    let dp = DegradeParams { p: 1.0, ..DegradeParams::default() };
    let degraded: Vec<ModalityPair> = clean.iter().map(|p| pseudo_degrade(p, &dp, &mut rng).0).collect();
    let refs: Vec<&ModalityPair> = clean.iter().collect();
    let (r, t) = normalize_for_net(&refs);
    let base = forward(&base_params, &r, &t).unwrap().0;
    let fx = Fixture { clean, degraded, base };

    loss_and_grads(&mut params, &fx, true);
    let ids: Vec<String> = params.set.ids().map(str::to_string).collect();
    let len = |id: &str| params.value(id).unwrap().len();
    let mut picks: Vec<(String, usize)> = ids.iter().map(|id| (id.clone(), rng.random_range(0..len(id)))).collect();
    while picks.len() < samples {
        let id = &ids[rng.random_range(0..ids.len())];
        picks.push((id.clone(), rng.random_range(0..len(id))));
    }

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (id, k) in &picks {
        let an = params.set.by_id(id).unwrap().grad.data()[*k];
        let orig = params.value(id).unwrap().data()[*k];
        params.value_mut(id).unwrap().data_mut()[*k] = orig + h;
        let up = loss_and_grads(&mut params, &fx, false);
        params.value_mut(id).unwrap().data_mut()[*k] = orig - h;
        let dn = loss_and_grads(&mut params, &fx, false);
        params.value_mut(id).unwrap().data_mut()[*k] = orig;
        let fd = (up - dn) / (2.0 * h);
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    (worst, picks.len())
}
