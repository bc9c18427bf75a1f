use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::harness::Dataset;
use crate::numerics::Tensor;
use crate::snn::{
    ann_forward, predict, run_ann, run_snn, snn_forward, LayerSpec, Model, NetworkSpec, NormMode, PoissonEncoder,
    RunOptions,
};

fn spec(input: usize, classes: usize, time_steps: usize, layers: Vec<LayerSpec>) -> NetworkSpec {
    NetworkSpec {
        architecture: "custom".into(),
        dataset: "toy".into(),
        time_steps,
        input_shape: [1, 1, input],
        classes,
        layers,
    }
}

fn lin(name: &str, i: usize, o: usize, bias: bool) -> LayerSpec {
    LayerSpec::Linear {
        name: name.into(),
        in_features: i,
        out_features: o,
        bias,
    }
}

fn randomize(model: &mut Model, rng: &mut ChaCha8Rng, scale: f64) {
    for (name, t) in model.tensors.iter_mut() {
        if name.ends_with(".running_var") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0));
        } else if name.ends_with(".gamma") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        } else {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-scale..scale));
        }
    }
}

fn random_images(rng: &mut ChaCha8Rng, batch: usize, features: usize) -> Tensor {
    let data = (0..batch * features).map(|_| rng.random_range(0.0..1.0)).collect();
    Tensor::from_vec(&[batch, 1, 1, features], data).unwrap()
}

fn record(model: &Model, x: &Tensor, seed: u64, norm: NormMode) -> crate::snn::SnnRun {
    let ids: Vec<u64> = (0..x.dim0() as u64).collect();
    let opts = RunOptions {
        record: true,
        norm,
        ..RunOptions::eval(model.spec.time_steps, seed, &ids)
    };
    run_snn(model, x, opts).unwrap()
}

type Rows = Vec<Vec<f64>>;

/// Forward-mode derivative of the output potential with respect to one
/// parameter element, for fully connected SNNs. Spikes pass tangents through
/// the surrogate slope; the reset gate `(1 - o)` is held constant.
fn tangent(model: &Model, spikes: &[Rows], norm: NormMode, dir: (&str, usize)) -> Rows {
    let batch = spikes[0].len();
    let n = model.spec.layers.len();
    let mut state: Vec<Option<(Rows, Rows)>> = vec![None; n];
    let mut big_u = vec![vec![0.0; model.spec.classes]; batch];
    let mut d_big_u = big_u.clone();
    let hit = |name: String, idx: usize| if dir.0 == name && dir.1 == idx { 1.0 } else { 0.0 };
    for (t, s) in spikes.iter().enumerate() {
        let mut x = s.clone();
        let mut dx = vec![vec![0.0; x[0].len()]; batch];
        for (k, layer) in model.spec.layers.iter().enumerate() {
            match layer {
                LayerSpec::Linear {
                    name,
                    in_features,
                    out_features,
                    bias,
                } => {
                    let w = model.tensors[&format!("{name}.weight")].data();
                    let mut y = vec![vec![0.0; *out_features]; batch];
                    let mut dy = y.clone();
                    for b in 0..batch {
                        for o in 0..*out_features {
                            for i in 0..*in_features {
                                y[b][o] += w[o * in_features + i] * x[b][i];
                                dy[b][o] += w[o * in_features + i] * dx[b][i]
                                    + hit(format!("{name}.weight"), o * in_features + i) * x[b][i];
                            }
                            if *bias {
                                y[b][o] += model.tensors[&format!("{name}.bias")].data()[o];
                                dy[b][o] += hit(format!("{name}.bias"), o);
                            }
                        }
                    }
                    x = y;
                    dx = dy;
                }
                LayerSpec::BnttNorm {
                    name, channels, eps, ..
                } => {
                    let c_n = *channels;
                    let gamma = model.tensors[&format!("{name}.gamma")].data();
                    for c in 0..c_n {
                        let col: Vec<f64> = x.iter().map(|r| r[c]).collect();
                        let dcol: Vec<f64> = dx.iter().map(|r| r[c]).collect();
                        let nb = batch as f64;
                        let (m, v, dm, dv) = match norm {
                            NormMode::Running => (
                                model.tensors[&format!("{name}.running_mean")].data()[t * c_n + c],
                                model.tensors[&format!("{name}.running_var")].data()[t * c_n + c],
                                0.0,
                                0.0,
                            ),
                            NormMode::Batch => {
                                let m = col.iter().sum::<f64>() / nb;
                                let v = col.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / nb;
                                let dm = dcol.iter().sum::<f64>() / nb;
                                let dv = col
                                    .iter()
                                    .zip(&dcol)
                                    .map(|(a, da)| 2.0 * (a - m) * (da - dm))
                                    .sum::<f64>()
                                    / nb;
                                (m, v, dm, dv)
                            }
                        };
                        let inv = 1.0 / (v + eps).sqrt();
                        let g = gamma[t * c_n + c];
                        for b in 0..batch {
                            let xh = (col[b] - m) * inv;
                            let dxh = (dcol[b] - dm) * inv - 0.5 * (col[b] - m) * inv.powi(3) * dv;
                            x[b][c] = g * xh;
                            dx[b][c] = g * dxh + hit(format!("{name}.gamma"), t * c_n + c) * xh;
                        }
                    }
                }
                LayerSpec::Lif { threshold, leak } => {
                    let (u, du) = state[k].get_or_insert_with(|| {
                        (vec![vec![0.0; x[0].len()]; batch], vec![vec![0.0; x[0].len()]; batch])
                    });
                    for b in 0..batch {
                        for f in 0..x[b].len() {
                            let pre = leak * u[b][f] + x[b][f];
                            let dpre = leak * du[b][f] + dx[b][f];
                            let fired = pre > *threshold;
                            let slope = (1.0 - ((pre - threshold) / threshold).abs()).max(0.0);
                            u[b][f] = if fired { 0.0 } else { pre };
                            du[b][f] = if fired { 0.0 } else { dpre };
                            x[b][f] = if fired { 1.0 } else { 0.0 };
                            dx[b][f] = slope * dpre;
                        }
                    }
                }
                LayerSpec::OutputAccumulator => {
                    for b in 0..batch {
                        for c in 0..model.spec.classes {
                            big_u[b][c] += x[b][c];
                            d_big_u[b][c] += dx[b][c];
                        }
                    }
                }
                other => panic!("oracle does not model {other:?}"),
            }
        }
    }
    d_big_u
}

fn encoded(images: &Tensor, seed: u64, steps: usize) -> Vec<Rows> {
    let b = images.dim0();
    let ids: Vec<u64> = (0..b as u64).collect();
    let mut enc = PoissonEncoder::new(seed, &ids);
    (0..steps)
        .map(|_| {
            let s = enc.step(images).unwrap();
            s.data().chunks(s.len() / b).map(<[f64]>::to_vec).collect()
        })
        .collect()
}

fn check_against_oracle(model: &Model, images: &Tensor, seed: u64, norm: NormMode, d_u: &Tensor) -> f64 {
    let run = record(model, images, seed, norm);
    let grads = stbp_backward_from(model, run.trajectory.as_ref().unwrap(), d_u).unwrap();
    let spikes = encoded(images, seed, model.spec.time_steps);
    let classes = model.spec.classes;
    let mut worst: f64 = 0.0;
    for (name, g) in &grads {
        for idx in 0..g.len() {
            let du = tangent(model, &spikes, norm, (name, idx));
            let want: f64 = du
                .iter()
                .enumerate()
                .flat_map(|(b, row)| row.iter().enumerate().map(move |(c, v)| (b, c, v)))
                .map(|(b, c, v)| v * d_u.data()[b * classes + c])
                .sum();
            let err = (g.data()[idx] - want).abs() / want.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}

fn random_net(rng: &mut ChaCha8Rng, with_norm: bool) -> Model {
    let input = rng.random_range(1..=3);
    let steps = rng.random_range(1..=3);
    let classes = rng.random_range(1..=2);
    let hidden_layers = rng.random_range(1..=2);
    let mut layers = Vec::new();
    let mut width = input;
    let mut budget: usize = 6 - classes;
    for h in 0..hidden_layers {
        let out = rng.random_range(1..=budget.min(3).max(1));
        budget = budget.saturating_sub(out).max(1);
        let name = format!("fc{}", h + 1);
        layers.push(lin(&name, width, out, rng.random_bool(0.5)));
        if with_norm {
            layers.push(LayerSpec::BnttNorm {
                name: format!("{name}_bn"),
                channels: out,
                time_steps: steps,
                momentum: 0.1,
                eps: 1e-5,
            });
        }
        layers.push(LayerSpec::Lif {
            threshold: rng.random_range(0.3..1.2),
            leak: rng.random_range(0.5..1.0),
        });
        width = out;
    }
    layers.push(lin("out", width, classes, rng.random_bool(0.5)));
    layers.push(LayerSpec::OutputAccumulator);
    let mut m = Model::init(spec(input, classes, steps, layers), 0).unwrap();
    randomize(&mut m, rng, 1.5);
    m
}

#[test]
fn stbp_matches_forward_mode_oracle() {
    for seed in 0..40u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let with_norm = seed % 2 == 1;
        let model = random_net(&mut rng, with_norm);
        let batch = rng.random_range(2..=3);
        let images = random_images(&mut rng, batch, model.spec.input_shape[2]);
        let d_u = Tensor::from_vec(
            &[batch, model.spec.classes],
            (0..batch * model.spec.classes)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap();
        let modes: &[NormMode] = if with_norm {
            &[NormMode::Running, NormMode::Batch]
        } else {
            &[NormMode::Running]
        };
        for &mode in modes {
            let err = check_against_oracle(&model, &images, seed, mode, &d_u);
            assert!(err <= 1e-10, "seed {seed} {mode:?}: relative error {err:e}");
        }
    }
}

#[test]
fn stbp_with_cross_entropy_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let layers = vec![
        lin("fc1", 3, 3, true),
        LayerSpec::Lif {
            threshold: 0.8,
            leak: 0.9,
        },
        lin("fc2", 3, 3, false),
        LayerSpec::OutputAccumulator,
    ];
    let mut model = Model::init(spec(3, 3, 3, layers), 0).unwrap();
    randomize(&mut model, &mut rng, 1.5);
    let images = random_images(&mut rng, 2, 3);
    let labels = [2, 0];
    let run = record(&model, &images, 5, NormMode::Running);
    let (loss, grads) = stbp_backward(&model, &run, &labels).unwrap();
    let (loss2, d_u) = softmax_cross_entropy(&run.potential, &labels).unwrap();
    assert_eq!(loss, loss2);
    let direct = stbp_backward_from(&model, run.trajectory.as_ref().unwrap(), &d_u).unwrap();
    assert_eq!(grads, direct);
    assert!(check_against_oracle(&model, &images, 5, NormMode::Running, &d_u) <= 1e-10);
}

#[test]
fn two_two_one_hand_unrolled() {
    let (theta, lambda) = (1.0, 0.9);
    let layers = vec![
        lin("fc1", 2, 2, false),
        LayerSpec::Lif {
            threshold: theta,
            leak: lambda,
        },
        lin("fc2", 2, 1, false),
        LayerSpec::OutputAccumulator,
    ];
    let mut model = Model::init(spec(2, 1, 2, layers), 0).unwrap();
    let w1 = [[0.7, 0.6], [0.3, 0.2]];
    let w2 = [0.8, -0.4];
    *model.tensors.get_mut("fc1.weight").unwrap() = Tensor::from_vec(&[2, 2], vec![0.7, 0.6, 0.3, 0.2]).unwrap();
    *model.tensors.get_mut("fc2.weight").unwrap() = Tensor::from_vec(&[1, 2], w2.to_vec()).unwrap();
    // intensity 1 spikes every step
    let images = Tensor::full(&[1, 1, 1, 2], 1.0);
    let x = [1.0, 1.0];
    let slope = |u: f64| (1.0 - ((u - theta) / theta).abs()).max(0.0);

    let a: Vec<f64> = (0..2).map(|j| w1[j][0] * x[0] + w1[j][1] * x[1]).collect();
    let u0 = a.clone();
    let o0: Vec<f64> = u0.iter().map(|&u| if u > theta { 1.0 } else { 0.0 }).collect();
    let u1: Vec<f64> = (0..2).map(|j| lambda * u0[j] * (1.0 - o0[j]) + a[j]).collect();
    let o1: Vec<f64> = u1.iter().map(|&u| if u > theta { 1.0 } else { 0.0 }).collect();
    assert_eq!((o0.clone(), o1.clone()), (vec![1.0, 0.0], vec![1.0, 0.0]));

    let want_w2: Vec<f64> = (0..2).map(|j| o0[j] + o1[j]).collect();
    let mut want_w1 = vec![0.0; 4];
    for j in 0..2 {
        for i in 0..2 {
            let du0 = x[i];
            let du1 = lambda * (1.0 - o0[j]) * du0 + x[i];
            want_w1[j * 2 + i] = w2[j] * (slope(u0[j]) * du0 + slope(u1[j]) * du1);
        }
    }

    let run = record(&model, &images, 0, NormMode::Running);
    let d_u = Tensor::from_vec(&[1, 1], vec![1.0]).unwrap();
    let grads = stbp_backward_from(&model, run.trajectory.as_ref().unwrap(), &d_u).unwrap();
    for (g, w) in grads["fc2.weight"].data().iter().zip(&want_w2) {
        assert!((g - w).abs() <= 1e-10);
    }
    for (g, w) in grads["fc1.weight"].data().iter().zip(&want_w1) {
        assert!((g - w).abs() <= 1e-10, "{g} vs {w}");
    }
}

#[test]
fn linear_readout_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (steps, classes, input, batch) = (3, 3, 4, 2);
    let layers = vec![lin("out", input, classes, true), LayerSpec::OutputAccumulator];
    let mut model = Model::init(spec(input, classes, steps, layers), 0).unwrap();
    randomize(&mut model, &mut rng, 1.0);
    let images = random_images(&mut rng, batch, input);
    let labels = [1, 2];
    let run = record(&model, &images, 11, NormMode::Running);
    let (_, grads) = stbp_backward(&model, &run, &labels).unwrap();

    let spikes = encoded(&images, 11, steps);
    let w = model.tensors["out.weight"].data();
    let bias = model.tensors["out.bias"].data();
    for b in 0..batch {
        let counts: Vec<f64> = (0..input).map(|i| spikes.iter().map(|s| s[b][i]).sum()).collect();
        let logits: Vec<f64> = (0..classes)
            .map(|c| (0..input).map(|i| w[c * input + i] * counts[i]).sum::<f64>() + steps as f64 * bias[c])
            .collect();
        for (c, l) in logits.iter().enumerate() {
            assert!((run.potential.data()[b * classes + c] - l).abs() < 1e-12);
        }
    }
    let mut want_w = vec![0.0; classes * input];
    let mut want_b = vec![0.0; classes];
    for b in 0..batch {
        let counts: Vec<f64> = (0..input).map(|i| spikes.iter().map(|s| s[b][i]).sum()).collect();
        let z = &run.potential.data()[b * classes..(b + 1) * classes];
        let mx = z.iter().cloned().fold(f64::MIN, f64::max);
        let denom: f64 = z.iter().map(|v| (v - mx).exp()).sum();
        for c in 0..classes {
            let p = (z[c] - mx).exp() / denom;
            let r = (p - if labels[b] == c { 1.0 } else { 0.0 }) / batch as f64;
            want_b[c] += r * steps as f64;
            for i in 0..input {
                want_w[c * input + i] += r * counts[i];
            }
        }
    }
    for (g, w) in grads["out.weight"].data().iter().zip(&want_w) {
        assert!((g - w).abs() <= 1e-10);
    }
    for (g, w) in grads["out.bias"].data().iter().zip(&want_b) {
        assert!((g - w).abs() <= 1e-10);
    }
}

#[test]
fn silent_hidden_layer_blocks_gradient() {
    let layers = vec![
        lin("fc1", 2, 2, true),
        LayerSpec::Lif {
            threshold: 1e12,
            leak: 1.0,
        },
        lin("fc2", 2, 2, true),
        LayerSpec::OutputAccumulator,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut model = Model::init(spec(2, 2, 3, layers), 0).unwrap();
    randomize(&mut model, &mut rng, 1.0);
    let images = random_images(&mut rng, 3, 2);
    let run = record(&model, &images, 1, NormMode::Running);
    let (_, grads) = stbp_backward(&model, &run, &[0, 1, 1]).unwrap();
    // the surrogate slope at u far below threshold is u/threshold
    assert!(grads["fc1.weight"].max_abs() < 1e-10);
    assert_eq!(grads["fc2.weight"].max_abs(), 0.0);
    assert!(grads["fc2.bias"].max_abs() > 0.0);
}

#[test]
fn saturated_softmax_gives_vanishing_gradient() {
    let layers = vec![
        lin("fc1", 2, 2, false),
        LayerSpec::Lif {
            threshold: 0.5,
            leak: 0.9,
        },
        lin("fc2", 2, 2, true),
        LayerSpec::OutputAccumulator,
    ];
    let mut model = Model::init(spec(2, 2, 3, layers), 0).unwrap();
    *model.tensors.get_mut("fc1.weight").unwrap() = Tensor::from_vec(&[2, 2], vec![0.4, 0.3, -0.2, 0.5]).unwrap();
    let w2 = Tensor::from_vec(&[2, 2], vec![1.0, 0.5, -1.0, -0.5]).unwrap();
    *model.tensors.get_mut("fc2.weight").unwrap() = w2.clone();
    *model.tensors.get_mut("fc2.bias").unwrap() = Tensor::from_vec(&[2], vec![0.2, -0.2]).unwrap();
    let images = Tensor::from_vec(&[2, 1, 1, 2], vec![1.0, 0.7, 0.2, 0.9]).unwrap();
    let run = record(&model, &images, 2, NormMode::Running);
    let labels = predict(&run.potential);
    let (_, unscaled) = stbp_backward(&model, &run, &labels).unwrap();
    assert!(unscaled["fc2.bias"].max_abs() > 1e-3);

    for name in ["fc2.weight", "fc2.bias"] {
        model.tensors.get_mut(name).unwrap().scale(1e6);
    }
    let run = record(&model, &images, 2, NormMode::Running);
    assert_eq!(predict(&run.potential), labels);
    let (loss, grads) = stbp_backward(&model, &run, &labels).unwrap();
    assert!(loss < 1e-6);
    for g in grads.values() {
        assert!(g.max_abs() <= 1e-6);
    }
}

#[test]
fn missing_trajectory_is_an_error() {
    let layers = vec![lin("out", 2, 2, false), LayerSpec::OutputAccumulator];
    let model = Model::init(spec(2, 2, 2, layers), 0).unwrap();
    let images = Tensor::full(&[1, 1, 1, 2], 0.5);
    let ids = [0u64];
    let run = run_snn(&model, &images, RunOptions::eval(2, 0, &ids)).unwrap();
    assert!(matches!(
        stbp_backward(&model, &run, &[0]),
        Err(crate::error::Error::MissingTrajectory(_))
    ));
}

fn tiny_ann(rng: &mut ChaCha8Rng) -> Model {
    let layers = vec![
        LayerSpec::Conv {
            name: "conv1".into(),
            in_channels: 1,
            out_channels: 2,
            kernel: 3,
            stride: 1,
            padding: 1,
            bias: true,
        },
        LayerSpec::Relu,
        LayerSpec::AvgPool { window: 2 },
        LayerSpec::Conv {
            name: "conv2".into(),
            in_channels: 2,
            out_channels: 2,
            kernel: 2,
            stride: 1,
            padding: 0,
            bias: false,
        },
        LayerSpec::Relu,
        lin("fc1", 2, 3, true),
        LayerSpec::Relu,
        lin("fc2", 3, 3, true),
    ];
    let spec = NetworkSpec {
        architecture: "custom".into(),
        dataset: "toy".into(),
        time_steps: 0,
        input_shape: [1, 4, 4],
        classes: 3,
        layers,
    };
    let mut m = Model::init(spec, 0).unwrap();
    randomize(&mut m, rng, 1.0);
    m
}

#[test]
fn ann_gradients_match_finite_differences() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut model = tiny_ann(&mut rng);
        let data: Vec<f64> = (0..3 * 16).map(|_| rng.random_range(0.0..1.0)).collect();
        let images = Tensor::from_vec(&[3, 1, 4, 4], data).unwrap();
        let labels = [0, 2, 1];
        let run = run_ann(&model, &images, true).unwrap();
        let (_, grads) = ann_backward(&model, &run, &labels).unwrap();
        let loss = |m: &Model| {
            softmax_cross_entropy(&ann_forward(m, &images).unwrap(), &labels)
                .unwrap()
                .0
        };
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (name, g) in &grads {
            for idx in 0..g.len() {
                let orig = model.tensors[name].data()[idx];
                model.tensors.get_mut(name).unwrap().data_mut()[idx] = orig + h;
                let up = loss(&model);
                model.tensors.get_mut(name).unwrap().data_mut()[idx] = orig - h;
                let down = loss(&model);
                model.tensors.get_mut(name).unwrap().data_mut()[idx] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = g.data()[idx];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
        assert!(worst <= 1e-4, "seed {seed}: max relative error {worst:e}");
    }
}

fn xor_data() -> Dataset {
    let px = vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0];
    Dataset::new("xor", Tensor::from_vec(&[4, 1, 1, 2], px).unwrap(), vec![0, 1, 1, 0], 2).unwrap()
}

#[test]
fn surrogate_training_separates_xor() {
    let layers = vec![
        lin("fc1", 2, 16, true),
        LayerSpec::Lif {
            threshold: 1.0,
            leak: 0.99,
        },
        lin("fc2", 16, 2, true),
        LayerSpec::OutputAccumulator,
    ];
    let data = xor_data();
    let model = Model::init(spec(2, 2, 5, layers), 1).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 4,
        lr: 1e-2,
        seed: 1,
        ..Default::default()
    };
    let (trained, log) = train_sg(&model, &data, &cfg).unwrap();
    assert_eq!(log.len(), 200);
    let out = snn_forward(&trained, &data.images, 5, 0).unwrap();
    assert_eq!(predict(&out), data.labels);
    assert!(trained.tensors.values().all(Tensor::is_f32_exact));
}

#[test]
fn training_is_deterministic() {
    let layers = vec![
        lin("fc1", 2, 4, true),
        LayerSpec::Lif {
            threshold: 1.0,
            leak: 0.99,
        },
        lin("fc2", 4, 2, true),
        LayerSpec::OutputAccumulator,
    ];
    let model = Model::init(spec(2, 2, 3, layers), 1).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 2,
        lr: 1e-2,
        ..Default::default()
    };
    let a = train_sg(&model, &xor_data(), &cfg).unwrap();
    let b = train_sg(&model, &xor_data(), &cfg).unwrap();
    assert_eq!(a, b);
    assert!(train_ann(&model, &xor_data(), &cfg).is_err());
    assert!(train_bntt(&model, &xor_data(), &cfg).is_err());
}

#[test]
fn ann_training_separates_blobs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 200;
    let mut px = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for k in 0..n {
        let c = k % 2;
        let centre = if c == 0 { 0.25 } else { 0.75 };
        px.push(centre + rng.random_range(-0.15..0.15));
        px.push(centre + rng.random_range(-0.15..0.15));
        labels.push(c);
    }
    let data = Dataset::new("blobs", Tensor::from_vec(&[n, 1, 1, 2], px).unwrap(), labels, 2).unwrap();
    let spec = NetworkSpec {
        architecture: "custom".into(),
        dataset: "blobs".into(),
        time_steps: 0,
        input_shape: [1, 1, 2],
        classes: 2,
        layers: vec![lin("fc1", 2, 8, true), LayerSpec::Relu, lin("fc2", 8, 2, true)],
    };
    let model = Model::init(spec, 2).unwrap();
    let cfg = TrainConfig {
        epochs: 50,
        batch_size: 16,
        lr: 1e-2,
        ..Default::default()
    };
    let (trained, _) = train_ann(&model, &data, &cfg).unwrap();
    let pred = predict(&ann_forward(&trained, &data.images).unwrap());
    let correct = pred.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    assert!(correct as f64 / n as f64 >= 0.99, "{correct}/{n}");
}

#[test]
fn divergence_is_reported() {
    let layers = vec![lin("fc1", 2, 2, true), LayerSpec::Relu, lin("fc2", 2, 2, true)];
    let s = NetworkSpec {
        time_steps: 0,
        ..spec(2, 2, 0, layers)
    };
    let mut model = Model::init(s, 0).unwrap();
    model.tensors.get_mut("fc2.bias").unwrap().data_mut()[0] = f64::MAX;
    model.tensors.get_mut("fc2.bias").unwrap().data_mut()[1] = -f64::MAX;
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 4,
        ..Default::default()
    };
    let data = xor_data();
    let r = train_ann(&model, &data, &cfg);
    assert!(matches!(r, Err(crate::error::Error::Divergence(_))), "{r:?}");
}

fn calibration_net(zero: bool) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut m = tiny_ann(&mut rng);
    if zero {
        m.tensors.values_mut().for_each(|t| t.scale(0.0));
    } else {
        // positive first-layer bias keeps every layer active
        m.tensors
            .get_mut("conv1.bias")
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|b| *b = 0.5);
    }
    m
}

#[test]
fn conversion_copies_weights_and_dominates_calibration() {
    let ann = calibration_net(false);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let calib = Tensor::from_vec(
        &[70, 1, 4, 4],
        (0..70 * 16).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .unwrap();
    let snn = convert_ann_to_snn(&ann, 6, &calib, 9).unwrap();
    assert_eq!(snn.tensors, ann.tensors);
    assert!(snn.spec.layers.iter().all(|l| match l {
        LayerSpec::Lif { leak, .. } => *leak == 1.0,
        _ => true,
    }));
    let thresholds = snn.thresholds();
    assert_eq!(thresholds.len(), 3);
    let lifs = snn.spec.lif_layers();
    let ids: Vec<u64> = (0..70).collect();
    let mut peaks = vec![f64::NEG_INFINITY; lifs.len()];
    let mut observe = |k: usize, _t: usize, x: &Tensor| {
        if let Some(li) = lifs.iter().position(|&l| l == k) {
            peaks[li] = x.data().iter().cloned().fold(peaks[li], f64::max);
        }
    };
    let opts = RunOptions {
        observer: Some(&mut observe),
        ..RunOptions::eval(6, 9, &ids)
    };
    run_snn(&snn, &calib, opts).unwrap();
    for (p, t) in peaks.iter().zip(&thresholds) {
        assert!(p <= t, "{p} > {t}");
    }
    // the first layer sees the threshold exactly
    assert_eq!(peaks[0], thresholds[0]);
}

#[test]
fn conversion_rejects_degenerate_thresholds() {
    let ann = calibration_net(true);
    let calib = Tensor::full(&[4, 1, 4, 4], 0.5);
    let r = convert_ann_to_snn(&ann, 4, &calib, 0);
    assert!(
        matches!(r, Err(crate::error::Error::DegenerateThreshold { layer: 0, .. })),
        "{r:?}"
    );
    assert!(convert_ann_to_snn(&calibration_net(false), 4, &Tensor::zeros(&[0, 1, 4, 4]), 0).is_err());
}

fn bntt_net() -> Model {
    let layers = vec![
        lin("fc1", 3, 4, false),
        LayerSpec::BnttNorm {
            name: "fc1_bn".into(),
            channels: 4,
            time_steps: 3,
            momentum: 0.1,
            eps: 1e-5,
        },
        LayerSpec::Lif {
            threshold: 1.0,
            leak: 0.95,
        },
        lin("fc2", 4, 2, false),
        LayerSpec::OutputAccumulator,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut m = Model::init(spec(3, 2, 3, layers), 0).unwrap();
    randomize(&mut m, &mut rng, 1.0);
    m
}

#[test]
fn adaptation_touches_only_running_stats() {
    let model = bntt_net();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples = random_images(&mut rng, 80, 3);
    let adapted = adapt_bn_noise_aware(&model, &samples, 4, &AdaptConfig::default()).unwrap();
    for (name, t) in &model.tensors {
        if name.contains(".running_") {
            assert_ne!(t, &adapted.tensors[name]);
        } else {
            assert_eq!(t, &adapted.tensors[name], "{name} changed");
        }
    }
    let mean_only = adapt_bn_noise_aware(
        &model,
        &samples,
        4,
        &AdaptConfig {
            mean_only: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(
        mean_only.tensors["fc1_bn.running_var"],
        model.tensors["fc1_bn.running_var"]
    );
    assert_eq!(
        mean_only.tensors["fc1_bn.running_mean"],
        adapted.tensors["fc1_bn.running_mean"]
    );

    let none = adapt_bn_noise_aware(&model, &Tensor::zeros(&[0, 1, 1, 3]), 4, &AdaptConfig::default()).unwrap();
    assert_eq!(none, model);
}

#[test]
fn running_stats_follow_the_moving_average() {
    let model = bntt_net();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let samples = random_images(&mut rng, 10, 3);
    let cfg = AdaptConfig {
        batch_size: 10,
        mean_only: false,
    };
    let adapted = adapt_bn_noise_aware(&model, &samples, 6, &cfg).unwrap();
    let spikes = encoded(&samples, 6, 3);
    let w = model.tensors["fc1.weight"].data();
    for (t, s) in spikes.iter().enumerate() {
        for c in 0..4 {
            let pre: Vec<f64> = s.iter().map(|x| (0..3).map(|i| w[c * 3 + i] * x[i]).sum()).collect();
            let m = pre.iter().sum::<f64>() / 10.0;
            let v = pre.iter().map(|p| (p - m) * (p - m)).sum::<f64>() / 10.0;
            let old_m = model.tensors["fc1_bn.running_mean"].data()[t * 4 + c];
            let old_v = model.tensors["fc1_bn.running_var"].data()[t * 4 + c];
            let got_m = adapted.tensors["fc1_bn.running_mean"].data()[t * 4 + c];
            let got_v = adapted.tensors["fc1_bn.running_var"].data()[t * 4 + c];
            assert!((got_m - (0.9 * old_m + 0.1 * m)).abs() < 1e-6);
            assert!((got_v - (0.9 * old_v + 0.1 * v)).abs() < 1e-6);
        }
    }
}

#[test]
fn adapted_means_track_empirical_means() {
    let model = bntt_net();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 2048;
    let samples = random_images(&mut rng, n, 3);
    let cfg = AdaptConfig::default();
    let adapted = adapt_bn_noise_aware(&model, &samples, 7, &cfg).unwrap();
    let spikes = encoded(&samples, 7, 3);
    let w = model.tensors["fc1.weight"].data();
    // samples effectively averaged by an EMA over batches of size B
    let effective = cfg.batch_size as f64 * (2.0 - 0.1) / 0.1;
    for (t, s) in spikes.iter().enumerate() {
        for c in 0..4 {
            let pre: Vec<f64> = s.iter().map(|x| (0..3).map(|i| w[c * 3 + i] * x[i]).sum()).collect();
            let m = pre.iter().sum::<f64>() / n as f64;
            let sd = (pre.iter().map(|p| (p - m) * (p - m)).sum::<f64>() / n as f64).sqrt();
            let got = adapted.tensors["fc1_bn.running_mean"].data()[t * 4 + c];
            let se = sd / effective.sqrt();
            assert!(
                (got - m).abs() <= 3.0 * se + 1e-3,
                "t {t} c {c}: {got} vs {m} (se {se})"
            );
        }
    }
}
