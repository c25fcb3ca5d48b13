//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line reaches the terminal even
//! when all criteria pass. Exits non-zero if any criterion fails.

use std::io::Write;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::Instant;

use flowvit::autoenc::{self, AEConfig, AEWeights};
use flowvit::checkpoint::Checkpoint;
use flowvit::flowdata::{self, normalize, stratified_split, synth_generate, FlowDataset, SynthSpec};
use flowvit::heads::{self, lstm::Lstm, HeadConfig, HeadKind};
use flowvit::imagize::{patchify, plan_spec, to_image, unpatchify, ImageSpec};
use flowvit::metrics::{confusion, report};
use flowvit::numerics::ops;
use flowvit::numerics::{finite_difference_gradient, matmul_backward, relative_error, Params, Tensor};
use flowvit::trainer::{self, ModelBundle, TrainConfig};
use flowvit::vit::{Attention, EncoderBlock, EncoderWeights, TokenBatch, ViTConfig};
use flowvit::Rng;
use flowvit_cli::{cmd_train, TrainArgs};

const FD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_INSTANCES: usize = 20;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rand_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

fn dot(a: &Tensor, w: &Tensor) -> f64 {
    a.data().iter().zip(w.data()).map(|(x, y)| x * y).sum()
}

/// Accumulated parameter gradients of `model` next to central differences
/// of `loss`, every tensor flattened into one vector.
fn param_grads<M: Params + Clone>(model: &M, loss: &dyn Fn(&M) -> f64) -> (Vec<f64>, Vec<f64>) {
    let mut tensors = Vec::new();
    model.visit(&mut |p| tensors.push((p.value.clone(), p.grad.clone())));
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (idx, (value, grad)) in tensors.iter().enumerate() {
        let fd = finite_difference_gradient(
            |t| {
                let mut m = model.clone();
                let mut k = 0;
                m.visit_mut(&mut |p| {
                    if k == idx {
                        p.value = t.clone();
                    }
                    k += 1;
                });
                loss(&m)
            },
            value,
            FD_STEP,
        );
        analytic.extend_from_slice(grad.data());
        numeric.extend_from_slice(fd.data());
    }
    (analytic, numeric)
}

/// Relative error of the whole gradient (input and parameters together).
/// Per-tensor ratios are meaningless for tensors whose true gradient is
/// identically zero, such as the attention key bias.
fn joint_error(dx: &Tensor, nx: &Tensor, params: (Vec<f64>, Vec<f64>)) -> f64 {
    let (mut a, mut b) = params;
    a.extend_from_slice(dx.data());
    b.extend_from_slice(nx.data());
    relative_error(&a, &b)
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(2024);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, e: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(w) => w.1 = w.1.max(e),
        None => worst.push((name, e)),
    };

    for _ in 0..GRAD_INSTANCES {
        // matmul
        let (m, k, n) = (1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4));
        let a = rand_tensor(&mut rng, &[m, k], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[k, n], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[m, n], -1.0, 1.0);
        let (da, db) = matmul_backward(&a, &b, &w).unwrap();
        let na = finite_difference_gradient(|t| dot(&t.matmul(&b).unwrap(), &w), &a, FD_STEP);
        let nb = finite_difference_gradient(|t| dot(&a.matmul(t).unwrap(), &w), &b, FD_STEP);
        record("matmul", relative_error(da.data(), na.data()).max(relative_error(db.data(), nb.data())));

        // fused softmax + cross-entropy
        let (rows, c) = (1 + rng.below(4), 2 + rng.below(4));
        let z = rand_tensor(&mut rng, &[rows, c], -3.0, 3.0);
        let labels: Vec<usize> = (0..rows).map(|_| rng.below(c)).collect();
        let g = ops::softmax_cross_entropy_backward(&ops::softmax_rows(&z), &labels);
        let nz = finite_difference_gradient(|t| ops::cross_entropy_labels(&ops::softmax_rows(t), &labels), &z, FD_STEP);
        record("softmax+cross-entropy", relative_error(g.data(), nz.data()));

        // layer norm
        let (rows, d) = (1 + rng.below(3), 2 + rng.below(5));
        let x = rand_tensor(&mut rng, &[rows, d], -2.0, 2.0);
        let gamma: Vec<f64> = (0..d).map(|_| rng.uniform(0.5, 1.5)).collect();
        let beta: Vec<f64> = (0..d).map(|_| rng.uniform(-0.5, 0.5)).collect();
        let w = rand_tensor(&mut rng, &[rows, d], -1.0, 1.0);
        let (_, cache) = ops::layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        let (dx, dg, dbeta) = ops::layer_norm_backward(&cache, &gamma, &w);
        let ln = |x: &Tensor, g: &[f64], b: &[f64]| dot(&ops::layer_norm(x, g, b, 1e-5).unwrap().0, &w);
        let nx = finite_difference_gradient(|t| ln(t, &gamma, &beta), &x, FD_STEP);
        let ng = finite_difference_gradient(|t| ln(&x, t.data(), &beta), &Tensor::vector(gamma.clone()), FD_STEP);
        let nbeta = finite_difference_gradient(|t| ln(&x, &gamma, t.data()), &Tensor::vector(beta.clone()), FD_STEP);
        record(
            "layer_norm",
            relative_error(dx.data(), nx.data())
                .max(relative_error(&dg, ng.data()))
                .max(relative_error(&dbeta, nbeta.data())),
        );

        // ReLU away from the kink
        let x = Tensor::vector(
            (0..6)
                .map(|_| {
                    let v = rng.uniform(0.1, 2.0);
                    if rng.below(2) == 0 {
                        v
                    } else {
                        -v
                    }
                })
                .collect(),
        );
        let w = rand_tensor(&mut rng, &[6], -1.0, 1.0);
        let dx = ops::relu_backward(&x, &w);
        let nx = finite_difference_gradient(|t| dot(&ops::relu(t), &w), &x, FD_STEP);
        record("relu", relative_error(dx.data(), nx.data()));

        // LSTM cell and BPTT, both directions
        let (n, t, din, h) = (1 + rng.below(2), 1 + rng.below(4), 1 + rng.below(3), 1 + rng.below(3));
        let mut lstm = Lstm::init("lstm", din, h, &mut rng);
        for b in lstm.input.bias.value.data_mut() {
            *b = rng.uniform(-0.5, 0.5);
        }
        let reverse = rng.below(2) == 1;
        let x = TokenBatch::new(t, rand_tensor(&mut rng, &[n * t, din], -1.0, 1.0)).unwrap();
        let w = rand_tensor(&mut rng, &[n, h], -1.0, 1.0);
        let (_, cache) = lstm.forward(&x, reverse).unwrap();
        let dx = lstm.backward(&cache, &w).unwrap();
        let loss = |l: &Lstm, xt: &Tensor| dot(&l.forward(&TokenBatch::new(t, xt.clone()).unwrap(), reverse).unwrap().0, &w);
        let nx = finite_difference_gradient(|xt| loss(&lstm, xt), &x.tokens, FD_STEP);
        record("lstm", joint_error(&dx, &nx, param_grads(&lstm, &|l| loss(l, &x.tokens))));

        // multi-head attention
        let heads = 1 + rng.below(2);
        let d = heads * (1 + rng.below(3));
        let (n, t) = (1 + rng.below(2), 1 + rng.below(4));
        let mut att = Attention::init("att", d, &mut rng);
        att.visit_mut(&mut |p| {
            if p.name.ends_with("bias") {
                for b in p.value.data_mut() {
                    *b = rng.uniform(-0.3, 0.3);
                }
            }
        });
        let x = TokenBatch::new(t, rand_tensor(&mut rng, &[n * t, d], -1.0, 1.0)).unwrap();
        let w = rand_tensor(&mut rng, &[n * t, d], -1.0, 1.0);
        let (_, cache) = att.forward(&x, heads).unwrap();
        let dx = att.backward(&x, heads, &cache, &w).unwrap();
        let loss = |a: &Attention, xt: &Tensor| dot(&a.forward(&TokenBatch::new(t, xt.clone()).unwrap(), heads).unwrap().0, &w);
        let nx = finite_difference_gradient(|xt| loss(&att, xt), &x.tokens, FD_STEP);
        record("attention", joint_error(&dx, &nx, param_grads(&att, &|a| loss(a, &x.tokens))));

        // encoder block
        let cfg = ViTConfig {
            embed_dim: d,
            num_heads: heads,
            num_blocks: 1,
            mlp_hidden: 2 + rng.below(4),
            dropout_rate: 0.0,
            use_positional: true,
        };
        let mut block = EncoderBlock::init("block", &cfg, &mut rng);
        block.visit_mut(&mut |p| {
            for v in p.value.data_mut() {
                *v += rng.uniform(-0.2, 0.2);
            }
        });
        let mut r0 = Rng::new(0);
        let (_, cache) = block.forward(&x, &cfg, false, &mut r0).unwrap();
        let dx = block.backward(&cfg, &cache, &w).unwrap();
        let loss = |b: &EncoderBlock, xt: &Tensor| {
            let (y, _) = b.forward(&TokenBatch::new(t, xt.clone()).unwrap(), &cfg, false, &mut Rng::new(0)).unwrap();
            dot(&y.tokens, &w)
        };
        let nx = finite_difference_gradient(|xt| loss(&block, xt), &x.tokens, FD_STEP);
        record("encoder block", joint_error(&dx, &nx, param_grads(&block, &|b| loss(b, &x.tokens))));

        // autoencoder
        let din = 3 + rng.below(4);
        let cfg = AEConfig {
            input_dim: din,
            hidden: 2 + rng.below(4),
            latent_dim: 1 + rng.below(2),
        };
        let mut ae = AEWeights::init(&cfg, &mut rng);
        ae.visit_mut(&mut |p| {
            for v in p.value.data_mut() {
                *v += rng.uniform(-0.2, 0.2);
            }
        });
        let rows = 1 + rng.below(3);
        let x = rand_tensor(&mut rng, &[rows, din], 0.0, 1.0);
        let w = rand_tensor(&mut rng, &[rows, din], -1.0, 1.0);
        let (_, recon, cache) = ae.forward(&x).unwrap();
        let (_, g_mse) = autoenc::mse(&recon, &x);
        let mut probe = ae.clone();
        probe.backward(&cache, &g_mse).unwrap();
        let (pa, pn) = param_grads(&probe, &|a| autoenc::mse(&a.forward(&x).unwrap().1, &x).0);
        let dx = ae.backward(&cache, &w).unwrap();
        let nx = finite_difference_gradient(|t| dot(&ae.forward(t).unwrap().1, &w), &x, FD_STEP);
        record("autoencoder", relative_error(dx.data(), nx.data()).max(relative_error(&pa, &pn)));
    }

    let secs = start.elapsed().as_secs_f64();
    let summary = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    for (name, e) in &worst {
        ensure(*e < GRAD_TOL, || format!("{name}: relative error {e:.3e} ≥ {GRAD_TOL:e} ({summary})"))?;
    }
    ensure(secs < 60.0, || format!("took {secs:.1}s, limit 60s"))?;
    Ok(format!("{GRAD_INSTANCES} instances per op, worst: {summary}; {secs:.1}s"))
}

fn geometry_fidelity() -> Outcome {
    let cic = plan_spec(84, (6, 14), (2, 2)).map_err(|e| e.to_string())?;
    ensure(cic.patch_count() == 21 && cic.d_padded == 84 && cic.patch_len() == 4, || format!("84-feature plan {cic:?}"))?;
    let bot = plan_spec(37, (2, 19), (2, 1)).map_err(|e| e.to_string())?;
    ensure(bot.d_padded == 38 && bot.patch_count() == 19 && bot.patch_len() == 2, || format!("37-feature plan {bot:?}"))?;

    let mut rng = Rng::new(77);
    for case in 0..1000 {
        let (pr, pc) = (1 + rng.below(4), 1 + rng.below(4));
        let (gr, gc) = (1 + rng.below(5), 1 + rng.below(5));
        let (rows, cols) = (pr * gr, pc * gc);
        let d = 1 + rng.below(rows * cols);
        let spec = plan_spec(d, (rows, cols), (pr, pc)).map_err(|e| format!("case {case}: {e}"))?;
        let x: Vec<f64> = (0..d).map(|_| rng.normal() * 1e3).collect();
        let img = to_image(&x, &spec).map_err(|e| e.to_string())?;
        let ps = patchify(&img);
        let back = unpatchify(&ps);
        let same = back.pixels.data().iter().zip(img.pixels.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same && back.spec == img.spec, || format!("case {case}: roundtrip differs for {spec:?}"))?;
        let batch = spec.patchify_batch(&Tensor::matrix(1, d, x).unwrap()).map_err(|e| e.to_string())?;
        ensure(batch.data() == ps.patches.data(), || format!("case {case}: batch patchify differs"))?;
    }
    Ok("84 → 6×14 / 2×2 → 21 patches; 37 → 38 → 2×19 / 2×1 → 19 patches; 1000 random roundtrips bit-exact".into())
}

/// Straight-loop multi-head attention over one sequence `[t×d]`.
fn attention_oracle(att: &Attention, x: &[Vec<f64>], heads: usize) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let t = x.len();
    let d = x[0].len();
    let dh = d / heads;
    let project = |lin: &flowvit::numerics::Linear, v: &[f64]| -> Vec<f64> {
        let w = lin.weight.value.data();
        let b = lin.bias.value.data();
        let out = lin.fan_out();
        (0..out)
            .map(|j| b[j] + (0..v.len()).map(|i| v[i] * w[i * out + j]).sum::<f64>())
            .collect()
    };
    let q: Vec<Vec<f64>> = x.iter().map(|r| project(&att.query, r)).collect();
    let k: Vec<Vec<f64>> = x.iter().map(|r| project(&att.key, r)).collect();
    let v: Vec<Vec<f64>> = x.iter().map(|r| project(&att.value, r)).collect();
    let mut concat = vec![vec![0.0; d]; t];
    let mut weights = vec![vec![vec![0.0; t]; t]; heads];
    for h in 0..heads {
        for i in 0..t {
            let mut logits = vec![0.0; t];
            for j in 0..t {
                let mut s = 0.0;
                for c in h * dh..(h + 1) * dh {
                    s += q[i][c] * k[j][c];
                }
                logits[j] = s / (dh as f64).sqrt();
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..t {
                weights[h][i][j] = e[j] / z;
                for c in h * dh..(h + 1) * dh {
                    concat[i][c] += weights[h][i][j] * v[j][c];
                }
            }
        }
    }
    (concat.iter().map(|r| project(&att.output, r)).collect(), weights)
}

fn attention_oracle_equivalence() -> Outcome {
    let mut rng = Rng::new(5150);
    let (mut worst_out, mut worst_sum) = (0.0f64, 0.0f64);
    for case in 0..50 {
        let heads = 1 + rng.below(2);
        let d = heads * (1 + rng.below(8 / heads));
        let t = 1 + rng.below(5);
        let n = 1 + rng.below(2);
        let mut att = Attention::init("att", d, &mut rng);
        att.visit_mut(&mut |p| {
            for v in p.value.data_mut() {
                *v += rng.uniform(-0.5, 0.5);
            }
        });
        let x = TokenBatch::new(t, rand_tensor(&mut rng, &[n * t, d], -2.0, 2.0)).unwrap();
        let (out, cache) = att.forward(&x, heads).map_err(|e| e.to_string())?;
        for s in 0..n {
            let seq: Vec<Vec<f64>> = (0..t).map(|i| x.tokens.row(s * t + i).to_vec()).collect();
            let (o, w) = attention_oracle(&att, &seq, heads);
            for i in 0..t {
                for c in 0..d {
                    worst_out = worst_out.max((o[i][c] - out.row(s * t + i)[c]).abs());
                }
                for (h, wh) in w.iter().enumerate() {
                    let base = ((s * heads + h) * t + i) * t;
                    let row = &cache.weights[base..base + t];
                    worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
                    for j in 0..t {
                        worst_out = worst_out.max((row[j] - wh[i][j]).abs());
                    }
                }
            }
        }
        ensure(worst_out <= 1e-10, || format!("case {case}: deviation {worst_out:.3e} > 1e-10"))?;
        ensure(worst_sum <= 1e-12, || format!("case {case}: attention row sum off by {worst_sum:.3e}"))?;
    }
    Ok(format!("50 cases, max deviation {worst_out:.1e}, max |row sum − 1| {worst_sum:.1e}"))
}

fn permutation_equivariance() -> Outcome {
    let spec = ImageSpec::plan(38, 2, 19, 2, 1).unwrap();
    let t = spec.patch_count();
    let mut rng = Rng::new(99);
    let deviation = |use_positional: bool, rng: &mut Rng| -> f64 {
        let cfg = ViTConfig {
            use_positional,
            ..ViTConfig::default()
        };
        let enc = EncoderWeights::init(&cfg, &spec, rng);
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let patches = rand_tensor(rng, &[t, spec.patch_len()], -0.5, 1.5);
            let mut perm: Vec<usize> = (0..t).collect();
            rng.shuffle(&mut perm);
            let permuted = patches.select_rows(&perm);
            let (a, _) = enc.encode(&patches, &cfg, false, &mut Rng::new(0)).unwrap();
            let (b, _) = enc.encode(&permuted, &cfg, false, &mut Rng::new(0)).unwrap();
            let expected = a.tokens.select_rows(&perm);
            worst = worst.max(expected.max_abs_diff(&b.tokens));
        }
        worst
    };
    let without = deviation(false, &mut rng);
    let with = deviation(true, &mut rng);
    ensure(without <= 1e-9, || format!("without positions: deviation {without:.3e} > 1e-9"))?;
    ensure(with > 1e-3, || format!("with positions: deviation only {with:.3e}"))?;
    Ok(format!("20 permutations: no positions {without:.1e}, with positions {with:.2e}"))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn prepared(spec: &SynthSpec, seed: u64) -> (FlowDataset, FlowDataset) {
    let ds = synth_generate(spec).unwrap();
    let split = stratified_split(&ds, 0.2, seed).unwrap();
    let (train, rest, _) = normalize(&split.train, &[&split.test]).unwrap();
    (train, rest.into_iter().next().unwrap())
}

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn end_to_end_learnability() -> Outcome {
    let image = plan_spec(38, (2, 19), (2, 1)).unwrap();
    let mut parts = Vec::new();
    let mut failures = Vec::new();
    for kind in HeadKind::ALL {
        let mut scores = Vec::new();
        let mut slowest = 0.0f64;
        for seed in SEEDS {
            let (train, test) = prepared(&SynthSpec::balanced(4, 38, 500, 3.0, seed), seed);
            let tc = TrainConfig {
                seed,
                ..TrainConfig::default()
            };
            let start = Instant::now();
            let (model, _) = trainer::train_supervised(&train, &image, &ViTConfig::default(), &HeadConfig::new(kind, 4), &tc)
                .map_err(|e| e.to_string())?;
            slowest = slowest.max(start.elapsed().as_secs_f64());
            scores.push(trainer::evaluate(&model, &test).map_err(|e| e.to_string())?.macro_f1);
        }
        let med = median(scores.clone());
        parts.push(format!("{} median F1 {med:.3} (slowest run {slowest:.0}s)", kind.as_str()));
        if med < 0.95 {
            failures.push(format!("{} median macro-F1 {med:.4} < 0.95 {scores:?}", kind.as_str()));
        }
        if slowest >= 300.0 {
            failures.push(format!("{} run took {slowest:.0}s ≥ 300s", kind.as_str()));
        }
    }
    ensure(failures.is_empty(), || failures.join("; "))?;
    Ok(parts.join(", "))
}

fn imbalance_direction() -> Outcome {
    let image = plan_spec(38, (2, 19), (2, 1)).unwrap();
    let mut parts = Vec::new();
    let mut strictly_better = 0;
    let mut failures = Vec::new();
    for kind in HeadKind::ALL {
        let (mut vit, mut ae) = (Vec::new(), Vec::new());
        for seed in SEEDS {
            let spec = SynthSpec {
                class_names: flowdata::default_class_names(4),
                features: 38,
                rows: 4000,
                shares: vec![0.005, 0.52, 0.45, 0.025],
                margin: 3.0,
                seed,
            };
            let (train, test) = prepared(&spec, seed);
            let tc = TrainConfig {
                seed,
                ..TrainConfig::default()
            };
            let head = HeadConfig::new(kind, 4);
            let (model, _) = trainer::train_supervised(&train, &image, &ViTConfig::default(), &head, &tc).map_err(|e| e.to_string())?;
            vit.push(trainer::evaluate(&model, &test).map_err(|e| e.to_string())?.classes[0].recall);
            let run = trainer::train_ae_baseline(&train, &AEConfig::new(38), &head, &tc).map_err(|e| e.to_string())?;
            ae.push(trainer::evaluate(&run.model, &test).map_err(|e| e.to_string())?.classes[0].recall);
        }
        let (mv, ma) = (median(vit.clone()), median(ae.clone()));
        parts.push(format!("{} {mv:.2} vs {ma:.2}", kind.as_str()));
        if mv < ma {
            failures.push(format!("{}: ViT {vit:?} below AE {ae:?}", kind.as_str()));
        }
        if mv > ma {
            strictly_better += 1;
        }
    }
    ensure(failures.is_empty(), || failures.join("; "))?;
    ensure(strictly_better >= 1, || format!("no head strictly better: {}", parts.join(", ")))?;
    Ok(format!("median minority recall ViT vs AE: {}", parts.join(", ")))
}

fn write_synth_csv(path: &Path, spec: &SynthSpec) {
    let ds = synth_generate(spec).unwrap();
    let file = std::fs::File::create(path).unwrap();
    ds.write_csv(file, &flowdata::synth_feature_names(spec.features), "label").unwrap();
}

fn small_config(dir: &Path, data: &str) -> std::path::PathBuf {
    let cfg = dir.join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "data.path = {data}\nimage.rows = 2\nimage.cols = 19\nimage.patch_rows = 2\nimage.patch_cols = 1\n\
             vit.embed_dim = 16\nvit.heads = 2\nvit.blocks = 1\nvit.mlp_hidden = 32\ntrain.epochs = 3\ntrain.seed = 11\n"
        ),
    )
    .unwrap();
    cfg
}

fn determinism_and_persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_synth_csv(&dir.path().join("flows.csv"), &SynthSpec::balanced(4, 38, 100, 3.0, 3));
    let cfg = small_config(dir.path(), "flows.csv");
    let mut checked = 0;
    for pipeline in [trainer::Pipeline::Vit, trainer::Pipeline::Ae] {
        for kind in HeadKind::ALL {
            let mut outs = Vec::new();
            for run in 0..2 {
                let out = dir.path().join(format!("{pipeline}-{}-{run}", kind.as_str()));
                let args = TrainArgs {
                    config: cfg.clone(),
                    pipeline,
                    head: Some(kind),
                    out: out.clone(),
                };
                let outcome = cmd_train(&args, &mut std::io::sink()).map_err(|e| e.to_string())?;
                outs.push((out, outcome));
            }
            for file in ["checkpoint.json", "history.csv", "report.csv"] {
                let a = std::fs::read(outs[0].0.join(file)).unwrap();
                let b = std::fs::read(outs[1].0.join(file)).unwrap();
                ensure(a == b, || format!("{pipeline}/{}: {file} differs between identical runs", kind.as_str()))?;
            }
            ensure(outs[0].1.report == outs[1].1.report, || "reports differ".into())?;

            let ck = Checkpoint::load(&outs[0].1.checkpoint).map_err(|e| e.to_string())?;
            let resaved = dir.path().join("resaved.json");
            ck.save(&resaved).map_err(|e| e.to_string())?;
            let again = Checkpoint::load(&resaved).map_err(|e| e.to_string())?;
            let mut bits = (Vec::new(), Vec::new());
            ck.bundle.model.visit_all(&mut |p| bits.0.extend(p.value.data().iter().map(|v| v.to_bits())));
            again.bundle.model.visit_all(&mut |p| bits.1.extend(p.value.data().iter().map(|v| v.to_bits())));
            ensure(bits.0 == bits.1 && ck == again, || "save→load is not bit-exact".into())?;

            let raw = flowdata::load_csv(dir.path().join("flows.csv"), "label").unwrap();
            let ds = flowdata::clean(&raw, &Vec::<String>::new()).unwrap();
            let before = ck.bundle.evaluate_raw(&ds).map_err(|e| e.to_string())?;
            let after = again.bundle.evaluate_raw(&ds).map_err(|e| e.to_string())?;
            ensure(before == after, || "evaluation differs after reload".into())?;
            checked += 1;
        }
    }
    Ok(format!("{checked} pipeline/head combinations: identical files across runs, bit-exact reload, equal evaluation"))
}

struct OracleMetrics {
    precision: Vec<f64>,
    recall: Vec<f64>,
    f1: Vec<f64>,
    support: Vec<u64>,
    accuracy: f64,
}

/// Direct enumeration over the label pairs, no confusion matrix.
fn metrics_oracle(truth: &[usize], pred: &[usize], c: usize) -> OracleMetrics {
    let mut out = OracleMetrics {
        precision: vec![],
        recall: vec![],
        f1: vec![],
        support: vec![],
        accuracy: 0.0,
    };
    let mut correct = 0u64;
    for k in 0..c {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for (&t, &p) in truth.iter().zip(pred) {
            match (t == k, p == k) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
        correct += tp;
        let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        out.precision.push(p);
        out.recall.push(r);
        out.f1.push(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
        out.support.push(tp + fn_);
    }
    out.accuracy = if truth.is_empty() { 0.0 } else { correct as f64 / truth.len() as f64 };
    out
}

fn metrics_correctness() -> Outcome {
    let mut rng = Rng::new(8);
    let mut zero_division_cases = 0;
    for case in 0..100 {
        let c = 1 + rng.below(5);
        let n = rng.below(51);
        let truth: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let r = report(&confusion(&truth, &pred, c).map_err(|e| e.to_string())?);
        let o = metrics_oracle(&truth, &pred, c);
        for k in 0..c {
            let m = &r.classes[k];
            ensure(
                m.precision == o.precision[k] && m.recall == o.recall[k] && m.f1 == o.f1[k] && m.support == o.support[k],
                || format!("case {case} class {k}: {m:?} vs oracle P {} R {} F1 {}", o.precision[k], o.recall[k], o.f1[k]),
            )?;
            if !pred.contains(&k) {
                zero_division_cases += 1;
            }
        }
        ensure(r.accuracy == o.accuracy, || format!("case {case}: accuracy {} vs {}", r.accuracy, o.accuracy))?;
        let macro_f1 = o.f1.iter().sum::<f64>() / c as f64;
        ensure(r.macro_f1 == macro_f1, || format!("case {case}: macro F1 {} vs {macro_f1}", r.macro_f1))?;
    }
    ensure(zero_division_cases > 0, || "no zero-division case was generated".into())?;
    Ok(format!("100 random cases exact, {zero_division_cases} never-predicted classes reported as 0"))
}

fn streaming_contract() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_synth_csv(&dir.path().join("flows.csv"), &SynthSpec::balanced(4, 38, 100, 3.0, 21));
    let cfg = small_config(dir.path(), "flows.csv");
    let out = dir.path().join("model");
    let args = TrainArgs {
        config: cfg,
        pipeline: trainer::Pipeline::Vit,
        head: Some(HeadKind::Lstm),
        out,
    };
    let outcome = cmd_train(&args, &mut std::io::sink()).map_err(|e| e.to_string())?;
    let bundle: ModelBundle = Checkpoint::load(&outcome.checkpoint).map_err(|e| e.to_string())?.bundle;

    let rows = synth_generate(&SynthSpec::balanced(4, 38, 2500, 3.0, 22)).unwrap();
    let mut input = String::new();
    for i in 0..rows.len() {
        let cells: Vec<String> = rows.features.row(i).iter().map(|v| v.to_string()).collect();
        input.push_str(&cells.join(","));
        input.push('\n');
    }

    let mut child = Command::new(env!("CARGO_BIN_EXE_flowvit"))
        .args(["infer", "--checkpoint"])
        .arg(&outcome.checkpoint)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| e.to_string())?;
    let mut stdin = child.stdin.take().unwrap();
    let feeder = std::thread::spawn(move || stdin.write_all(input.as_bytes()));
    let result = child.wait_with_output().map_err(|e| e.to_string())?;
    feeder.join().unwrap().map_err(|e| e.to_string())?;
    ensure(result.status.code() == Some(0), || format!("exit status {:?}", result.status))?;
    let stdout = String::from_utf8(result.stdout).map_err(|e| e.to_string())?;
    let lines: Vec<&str> = stdout.lines().collect();
    ensure(lines.len() == rows.len(), || format!("{} output lines for {} rows", lines.len(), rows.len()))?;

    let probs = bundle.predict_proba_raw(&rows.features).map_err(|e| e.to_string())?;
    for (i, line) in lines.iter().enumerate() {
        let (name, conf) = line.split_once('\t').ok_or_else(|| format!("line {}: no tab in {line:?}", i + 1))?;
        let k = heads::predict(probs.row(i));
        ensure(name == bundle.class_names[k], || format!("line {}: streamed {name}, batch {}", i + 1, bundle.class_names[k]))?;
        let conf: f64 = conf.parse().map_err(|_| format!("line {}: bad confidence {conf:?}", i + 1))?;
        ensure((conf - probs.row(i)[k]).abs() <= 5e-7 + 1e-12, || format!("line {}: confidence {conf} vs {}", i + 1, probs.row(i)[k]))?;
    }
    Ok(format!("{} rows in, {} lines out, all classes equal to batch evaluation", rows.len(), lines.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient correctness", gradient_correctness),
        ("geometry fidelity", geometry_fidelity),
        ("attention oracle equivalence", attention_oracle_equivalence),
        ("permutation equivariance", permutation_equivariance),
        ("end-to-end learnability", end_to_end_learnability),
        ("imbalance direction", imbalance_direction),
        ("determinism and persistence", determinism_and_persistence),
        ("metrics correctness", metrics_correctness),
        ("streaming contract", streaming_contract),
    ];
    let only: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
        .unwrap_or_default();

    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let number = i + 1;
        if !only.is_empty() && !only.contains(&number) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {number} {name} [{secs:.1}s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {number} {name} [{secs:.1}s]: {detail}");
            }
        }
        let _ = std::io::stdout().flush();
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
