//! Central finite-difference oracles for every graph operator and for the
//! end-to-end tiny model.
//!
//! Relative error metric: |ad - fd| / max(1, |ad|, |fd|), maximized over
//! all parameter elements. Inputs for kinked ops (relu, dropout masks) are
//! sampled away from the kink so the difference quotient is valid.

use fpad_nn::graph::LstmWeights;
use fpad_nn::model::nchw_from_thwc;
use fpad_nn::{Graph, Model, ModelConfig, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_H: f64 = 1e-5;
const OP_TOL: f64 = 1e-4;
const E2E_TOL: f64 = 1e-3;
const SEEDS: u64 = 20;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Magnitudes in [0.1, 1.1]: keeps relu inputs off the kink under +-h.
fn rand_tensor_off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n)
            .map(|_| {
                let mag = rng.random_range(0.1..1.1);
                if rng.random_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect(),
    )
}

/// Build the graph twice: once for analytic gradients, then 2 * numel
/// times for central differences, and report the worst relative error.
fn max_rel_err(params: &[Tensor], build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &ids);
    assert_eq!(g.value(loss).numel(), 1, "oracle target must be scalar");
    g.backward(loss).expect("backward");
    let analytic: Vec<Tensor> = ids
        .iter()
        .map(|&id| {
            g.grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(id).shape()))
        })
        .collect();

    let eval = |vals: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &ids);
        g.value(loss).item()
    };

    let mut worst = 0.0f64;
    for (pi, base) in params.iter().enumerate() {
        for e in 0..base.numel() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[e] += FD_H;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[e] -= FD_H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_H);
            let ad = analytic[pi].data()[e];
            let err = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}

fn check_op(name: &str, tol: f64, mut case: impl FnMut(&mut ChaCha8Rng) -> f64) {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        worst = worst.max(case(&mut rng));
    }
    println!("gradcheck {name}: max relative error {worst:.3e}");
    assert!(worst < tol, "{name}: max relative error {worst} >= {tol}");
}

#[test]
fn add_mul_scale_sum() {
    check_op("add", OP_TOL, |rng| {
        let a = rand_tensor(&[3, 4], rng);
        let b = rand_tensor(&[3, 4], rng);
        let proj = rand_tensor(&[3, 4], rng);
        max_rel_err(&[a, b], &|g, ids| {
            let y = g.add(ids[0], ids[1]).unwrap();
            let w = g.input(proj.clone());
            let p = g.mul(y, w).unwrap();
            g.sum(p)
        })
    });
    check_op("mul", OP_TOL, |rng| {
        let a = rand_tensor(&[2, 5], rng);
        let b = rand_tensor(&[2, 5], rng);
        let proj = rand_tensor(&[2, 5], rng);
        max_rel_err(&[a, b], &|g, ids| {
            let y = g.mul(ids[0], ids[1]).unwrap();
            let w = g.input(proj.clone());
            let p = g.mul(y, w).unwrap();
            g.sum(p)
        })
    });
    check_op("scale", OP_TOL, |rng| {
        let a = rand_tensor(&[4, 3], rng);
        let proj = rand_tensor(&[4, 3], rng);
        max_rel_err(&[a], &|g, ids| {
            let y = g.scale(ids[0], -0.7);
            let w = g.input(proj.clone());
            let p = g.mul(y, w).unwrap();
            g.sum(p)
        })
    });
}

#[test]
fn add_row_and_dense() {
    check_op("add_row", OP_TOL, |rng| {
        let x = rand_tensor(&[3, 4], rng);
        let b = rand_tensor(&[4], rng);
        let proj = rand_tensor(&[3, 4], rng);
        max_rel_err(&[x, b], &|g, ids| {
            let y = g.add_row(ids[0], ids[1]).unwrap();
            let w = g.input(proj.clone());
            let p = g.mul(y, w).unwrap();
            g.sum(p)
        })
    });
    check_op("dense", OP_TOL, |rng| {
        let x = rand_tensor(&[3, 5], rng);
        let w = rand_tensor(&[5, 2], rng);
        let b = rand_tensor(&[2], rng);
        let proj = rand_tensor(&[3, 2], rng);
        max_rel_err(&[x, w, b], &|g, ids| {
            let y = g.dense(ids[0], ids[1], ids[2]).unwrap();
            let pw = g.input(proj.clone());
            let p = g.mul(y, pw).unwrap();
            g.sum(p)
        })
    });
}

#[test]
fn matmul_grad() {
    check_op("matmul", OP_TOL, |rng| {
        let a = rand_tensor(&[4, 3], rng);
        let b = rand_tensor(&[3, 5], rng);
        let proj = rand_tensor(&[4, 5], rng);
        max_rel_err(&[a, b], &|g, ids| {
            let y = g.matmul(ids[0], ids[1]).unwrap();
            let w = g.input(proj.clone());
            let p = g.mul(y, w).unwrap();
            g.sum(p)
        })
    });
}

#[test]
fn activations() {
    check_op("relu", OP_TOL, |rng| {
        let x = rand_tensor_off_kink(&[4, 6], rng);
        let proj = rand_tensor(&[4, 6], rng);
        max_rel_err(&[x], &|g, ids| {
            let y = g.relu(ids[0]);
            let w = g.input(proj.clone());
            let p = g.mul(y, w).unwrap();
            g.sum(p)
        })
    });
    check_op("sigmoid", OP_TOL, |rng| {
        let x = rand_tensor(&[3, 4], rng);
        let proj = rand_tensor(&[3, 4], rng);
        max_rel_err(&[x], &|g, ids| {
            let y = g.sigmoid(ids[0]);
            let w = g.input(proj.clone());
            let p = g.mul(y, w).unwrap();
            g.sum(p)
        })
    });
    check_op("tanh", OP_TOL, |rng| {
        let x = rand_tensor(&[3, 4], rng);
        let proj = rand_tensor(&[3, 4], rng);
        max_rel_err(&[x], &|g, ids| {
            let y = g.tanh(ids[0]);
            let w = g.input(proj.clone());
            let p = g.mul(y, w).unwrap();
            g.sum(p)
        })
    });
}

#[test]
fn slicing_concat_gather() {
    check_op("slice_cols", OP_TOL, |rng| {
        let x = rand_tensor(&[3, 6], rng);
        let proj = rand_tensor(&[3, 3], rng);
        max_rel_err(&[x], &|g, ids| {
            let y = g.slice_cols(ids[0], 2, 5).unwrap();
            let w = g.input(proj.clone());
            let p = g.mul(y, w).unwrap();
            g.sum(p)
        })
    });
    check_op("concat_cols", OP_TOL, |rng| {
        let a = rand_tensor(&[2, 3], rng);
        let b = rand_tensor(&[2, 4], rng);
        let proj = rand_tensor(&[2, 7], rng);
        max_rel_err(&[a, b], &|g, ids| {
            let y = g.concat_cols(ids[0], ids[1]).unwrap();
            let w = g.input(proj.clone());
            let p = g.mul(y, w).unwrap();
            g.sum(p)
        })
    });
    check_op("gather_rows", OP_TOL, |rng| {
        let x = rand_tensor(&[4, 3], rng);
        let proj = rand_tensor(&[5, 3], rng);
        max_rel_err(&[x], &|g, ids| {
            // repeated rows exercise gradient accumulation
            let y = g.gather_rows(ids[0], &[2, 0, 2, 3, 1]).unwrap();
            let w = g.input(proj.clone());
            let p = g.mul(y, w).unwrap();
            g.sum(p)
        })
    });
}

#[test]
fn convolutions() {
    for stride in [1usize, 2] {
        check_op(&format!("conv2d/s{stride}"), OP_TOL, |rng| {
            let x = rand_tensor(&[2, 3, 5, 5], rng);
            let w = rand_tensor(&[4, 3, 3, 3], rng);
            let geo_out = if stride == 1 { 5 } else { 3 };
            let proj = rand_tensor(&[2, 4, geo_out, geo_out], rng);
            max_rel_err(&[x, w], &|g, ids| {
                let y = g.conv2d(ids[0], ids[1], stride).unwrap();
                let pw = g.input(proj.clone());
                let p = g.mul(y, pw).unwrap();
                g.sum(p)
            })
        });
        check_op(&format!("depthwise_conv2d/s{stride}"), OP_TOL, |rng| {
            let x = rand_tensor(&[2, 3, 5, 5], rng);
            let w = rand_tensor(&[3, 3, 3], rng);
            let geo_out = if stride == 1 { 5 } else { 3 };
            let proj = rand_tensor(&[2, 3, geo_out, geo_out], rng);
            max_rel_err(&[x, w], &|g, ids| {
                let y = g.depthwise_conv2d(ids[0], ids[1], stride).unwrap();
                let pw = g.input(proj.clone());
                let p = g.mul(y, pw).unwrap();
                g.sum(p)
            })
        });
    }
    check_op("pointwise_conv2d", OP_TOL, |rng| {
        let x = rand_tensor(&[2, 3, 4, 4], rng);
        let w = rand_tensor(&[5, 3], rng);
        let proj = rand_tensor(&[2, 5, 4, 4], rng);
        max_rel_err(&[x, w], &|g, ids| {
            let y = g.pointwise_conv2d(ids[0], ids[1]).unwrap();
            let pw = g.input(proj.clone());
            let p = g.mul(y, pw).unwrap();
            g.sum(p)
        })
    });
}

#[test]
fn batch_norm_modes() {
    check_op("batch_norm/train", OP_TOL, |rng| {
        let x = rand_tensor(&[3, 2, 3, 3], rng);
        let gamma = rand_tensor(&[2], rng);
        let beta = rand_tensor(&[2], rng);
        let proj = rand_tensor(&[3, 2, 3, 3], rng);
        max_rel_err(&[x, gamma, beta], &|g, ids| {
            let (y, _, _) = g.batch_norm_train(ids[0], ids[1], ids[2]).unwrap();
            let pw = g.input(proj.clone());
            let p = g.mul(y, pw).unwrap();
            g.sum(p)
        })
    });
    check_op("batch_norm/eval", OP_TOL, |rng| {
        let x = rand_tensor(&[3, 2, 3, 3], rng);
        let gamma = rand_tensor(&[2], rng);
        let beta = rand_tensor(&[2], rng);
        let mean = rand_tensor(&[2], rng);
        let var = Tensor::from_vec(&[2], vec![rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)]);
        let proj = rand_tensor(&[3, 2, 3, 3], rng);
        max_rel_err(&[x, gamma, beta], &|g, ids| {
            let y = g
                .batch_norm_eval(ids[0], ids[1], ids[2], &mean, &var)
                .unwrap();
            let pw = g.input(proj.clone());
            let p = g.mul(y, pw).unwrap();
            g.sum(p)
        })
    });
}

#[test]
fn pooling_dropout_softmax_loss() {
    check_op("global_avg_pool", OP_TOL, |rng| {
        let x = rand_tensor(&[2, 3, 4, 4], rng);
        let proj = rand_tensor(&[2, 3], rng);
        max_rel_err(&[x], &|g, ids| {
            let y = g.global_avg_pool(ids[0]).unwrap();
            let pw = g.input(proj.clone());
            let p = g.mul(y, pw).unwrap();
            g.sum(p)
        })
    });
    check_op("dropout", OP_TOL, |rng| {
        let x = rand_tensor(&[3, 8], rng);
        let proj = rand_tensor(&[3, 8], rng);
        let mask_seed = rng.random::<u64>();
        max_rel_err(&[x], &|g, ids| {
            // the same seed reproduces the same mask on every evaluation
            let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
            let y = g.dropout(ids[0], 0.25, &mut mask_rng).unwrap();
            let pw = g.input(proj.clone());
            let p = g.mul(y, pw).unwrap();
            g.sum(p)
        })
    });
    check_op("softmax", OP_TOL, |rng| {
        let x = rand_tensor(&[3, 4], rng);
        let proj = rand_tensor(&[3, 4], rng);
        max_rel_err(&[x], &|g, ids| {
            let y = g.softmax(ids[0]).unwrap();
            let pw = g.input(proj.clone());
            let p = g.mul(y, pw).unwrap();
            g.sum(p)
        })
    });
    check_op("bce_loss", OP_TOL, |rng| {
        let x = rand_tensor(&[4, 2], rng);
        max_rel_err(&[x], &|g, ids| {
            let p = g.softmax(ids[0]).unwrap();
            g.bce_loss(p, &[0, 1, 1, 0]).unwrap()
        })
    });
}

#[test]
fn lstm_cell_and_bidirectional() {
    check_op("lstm_cell", OP_TOL, |rng| {
        let units = 3;
        let x = rand_tensor(&[2, 4], rng);
        let h = rand_tensor(&[2, 3], rng);
        let c = rand_tensor(&[2, 3], rng);
        let w = rand_tensor(&[4, 12], rng);
        let r = rand_tensor(&[3, 12], rng);
        let b = rand_tensor(&[12], rng);
        let proj_h = rand_tensor(&[2, 3], rng);
        let proj_c = rand_tensor(&[2, 3], rng);
        max_rel_err(&[x, h, c, w, r, b], &|g, ids| {
            let weights = LstmWeights {
                w: ids[3],
                r: ids[4],
                b: ids[5],
            };
            let (h2, c2) = g.lstm_cell(ids[0], ids[1], ids[2], &weights, units).unwrap();
            let ph = g.input(proj_h.clone());
            let pc = g.input(proj_c.clone());
            let a = g.mul(h2, ph).unwrap();
            let b2 = g.mul(c2, pc).unwrap();
            let s = g.add(a, b2).unwrap();
            g.sum(s)
        })
    });
    check_op("bidirectional_lstm", OP_TOL, |rng| {
        let units = 2;
        let steps: Vec<Tensor> = (0..3).map(|_| rand_tensor(&[2, 3], rng)).collect();
        let wf = rand_tensor(&[3, 8], rng);
        let rf = rand_tensor(&[2, 8], rng);
        let bf = rand_tensor(&[8], rng);
        let wb = rand_tensor(&[3, 8], rng);
        let rb = rand_tensor(&[2, 8], rng);
        let bb = rand_tensor(&[8], rng);
        let proj = rand_tensor(&[2, 4], rng);
        let params: Vec<Tensor> = steps
            .iter()
            .cloned()
            .chain([wf, rf, bf, wb, rb, bb])
            .collect();
        max_rel_err(&params, &|g, ids| {
            let fwd = LstmWeights {
                w: ids[3],
                r: ids[4],
                b: ids[5],
            };
            let bwd = LstmWeights {
                w: ids[6],
                r: ids[7],
                b: ids[8],
            };
            let y = g.bidirectional_lstm(&ids[0..3], &fwd, &bwd, units).unwrap();
            let pw = g.input(proj.clone());
            let p = g.mul(y, pw).unwrap();
            g.sum(p)
        })
    });
}

/// End-to-end: loss gradient w.r.t. every model parameter on the tiny
/// config (T = 3, 8x8 input), train-mode forward with a fixed dropout mask.
#[test]
fn end_to_end_tiny_model() {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut model = Model::build(ModelConfig::tiny(), seed).unwrap();
        // the zero head blocks gradient flow into the backbone; give it
        // real values so the check is not vacuous
        for name in ["head.w", "head.b"] {
            let t = model.params.get_mut(name);
            let fresh = rand_tensor(t.shape(), &mut rng);
            *t = fresh;
        }

        let batch = 2;
        let t = model.config.frames;
        let s = model.config.backbone.input_size;
        let thwc: Vec<f64> = (0..batch * t * s * s * 3)
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        let mut stacked = Vec::new();
        for b in 0..batch {
            let per = t * s * s * 3;
            stacked.push(nchw_from_thwc(t, s, s, &thwc[b * per..(b + 1) * per]));
        }
        let mut input_data = Vec::new();
        for te in &stacked {
            input_data.extend_from_slice(te.data());
        }
        let input = Tensor::from_vec(&[batch * t, 3, s, s], input_data);
        let targets = [0usize, 1];
        let mask_seed = 4242u64;

        let names: Vec<String> = model.params.names().cloned().collect();
        let loss_of = |m: &Model| -> f64 {
            let mut g = Graph::new();
            let bound = m.bind(&mut g);
            let mut drop_rng = ChaCha8Rng::seed_from_u64(mask_seed);
            let (nodes, _) = m
                .forward(&mut g, &bound, input.clone(), batch, true, Some(&mut drop_rng))
                .unwrap();
            let loss = g.bce_loss(nodes.probs, &targets).unwrap();
            g.value(loss).item()
        };

        // analytic gradients
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(mask_seed);
        let (nodes, _) = model
            .forward(&mut g, &bound, input.clone(), batch, true, Some(&mut drop_rng))
            .unwrap();
        let loss = g.bce_loss(nodes.probs, &targets).unwrap();
        g.backward(loss).unwrap();

        for name in &names {
            let id = bound.nodes[name];
            let analytic = g
                .grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(model.params.get(name).shape()));
            for e in 0..analytic.numel() {
                let mut plus = model.clone();
                plus.params.get_mut(name).data_mut()[e] += FD_H;
                let mut minus = model.clone();
                minus.params.get_mut(name).data_mut()[e] -= FD_H;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * FD_H);
                let ad = analytic.data()[e];
                let err = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1.0);
                worst = worst.max(err);
            }
        }
    }
    println!("gradcheck end_to_end: max relative error {worst:.3e}");
    assert!(worst < E2E_TOL, "end-to-end max relative error {worst}");
}

/// Same seed, same graph, bit-identical forward values and gradients.
#[test]
fn deterministic_forward_backward() {
    let run = || -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x = rand_tensor(&[2, 3, 6, 6], &mut rng);
        let w = rand_tensor(&[4, 3, 3, 3], &mut rng);
        let mut g = Graph::new();
        let xp = g.param(x);
        let wp = g.param(w);
        let y = g.conv2d(xp, wp, 2).unwrap();
        let act = g.relu(y);
        let loss = g.sum(act);
        g.backward(loss).unwrap();
        (
            g.value(loss).data().to_vec(),
            g.grad(wp).unwrap().data().to_vec(),
        )
    };
    let (va, ga) = run();
    let (vb, gb) = run();
    assert_eq!(va, vb);
    assert_eq!(ga, gb);
}
