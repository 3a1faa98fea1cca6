use proptest::prelude::*;
use quarc_core::coreset::{score_dataset, score_ds, score_evs, score_res, MetricMask, ScoringPass, WorkCounter};
use quarc_core::data::Dataset;
use quarc_core::loss::{ce_loss, clc_loss, kd_loss, total_loss};
use quarc_core::model::{ModelDef, ModelInstance};
use quarc_core::quant::{init_scale, quantize_backward, QuantMode, QuantSpec};
use quarc_core::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn softmax_row(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_tensor(&mut rng, &[4, 5], -2.0, 2.0);
    let b = random_tensor(&mut rng, &[5, 3], -2.0, 2.0);
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(av, bv).unwrap();
    let c = g.value(c);
    assert_eq!(c.shape(), &[4, 3]);
    for i in 0..4 {
        for j in 0..3 {
            let mut s = 0.0;
            for k in 0..5 {
                s += a.data()[i * 5 + k] * b.data()[k * 3 + j];
            }
            assert!((c.data()[i * 3 + j] - s).abs() < 1e-12);
        }
    }
}

#[test]
fn log_exp_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_tensor(&mut rng, &[100], 0.1, 10.0);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let e = g.exp(xv).unwrap();
    let l = g.log(e).unwrap();
    for (a, b) in g.value(l).data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-9);
    }
}

/// Softmax with the normalizer accumulated by compensated summation.
fn softmax_compensated(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &x in &e {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() {
            (sum - t) + x
        } else {
            (x - t) + sum
        };
        sum = t;
    }
    let z = sum + comp;
    e.iter().map(|x| x / z).collect()
}

#[test]
fn softmax_matches_compensated_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, &[16, 10], -30.0, 30.0);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let p = g.softmax(xv).unwrap();
    let p = g.value(p);
    for r in 0..16 {
        let want = softmax_compensated(x.row(r));
        let sum: f64 = p.row(r).iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        for (a, b) in p.row(r).iter().zip(&want) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

fn ce_of(model: &ModelInstance, x: &Tensor, y: &[usize]) -> f64 {
    let out = model.forward(x).unwrap();
    let m = out.probs.last_dim();
    y.iter()
        .enumerate()
        .map(|(r, &c)| -(out.probs.data()[r * m + c] + 1e-12).ln())
        .sum::<f64>()
        / y.len() as f64
}

#[test]
fn two_layer_mlp_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = ModelInstance::init(ModelDef::mlp(3, &[5], 4), 9).unwrap();
    let x = random_tensor(&mut rng, &[6, 3], -1.5, 1.5);
    let y: Vec<usize> = (0..6).map(|i| i % 4).collect();

    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let out = model.forward_graph(&mut g, &bound, xv).unwrap();
    let loss = ce_loss(&mut g, out.probs, &y).unwrap();
    g.backward(loss).unwrap();
    let grads = model.collect_grads(&g, &bound).unwrap();

    let h = 1e-4;
    let mut checked = 0;
    for (l, lg) in grads.iter().enumerate() {
        for (is_bias, analytic) in [(false, &lg.weight), (true, &lg.bias)] {
            for k in 0..analytic.numel() {
                let bump = |d: f64| {
                    let mut m = model.clone();
                    let p = if is_bias {
                        &mut m.layers[l].bias
                    } else {
                        &mut m.layers[l].weight
                    };
                    p.data_mut()[k] += d;
                    ce_of(&m, &x, &y)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let a = analytic.data()[k];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(
                    rel < 1e-4,
                    "layer {l} bias {is_bias} index {k}: analytic {a} vs fd {fd}"
                );
                checked += 1;
            }
        }
    }
    assert_eq!(checked, model.param_count());
}

fn composite(g: &mut Graph, w: Var, a: &Tensor) -> Var {
    let av = g.constant(a.clone());
    let z = g.mul(w, av).unwrap();
    let r = g.relu(z);
    let s = g.add_const(r, 0.5).unwrap();
    let p = g.softmax(s).unwrap();
    let lp = g.log(p).unwrap();
    let e = g.exp(w).unwrap();
    let q = g.div(lp, e).unwrap();
    g.mean(q).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn composite_gradients_match_finite_differences(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w0 = random_tensor(&mut rng, &[2, 4], -1.0, 1.0);
        let a = random_tensor(&mut rng, &[2, 4], -2.0, 2.0);
        let mut g = Graph::new();
        let w = g.param(w0.clone());
        let loss = composite(&mut g, w, &a);
        g.backward(loss).unwrap();
        let grad = g.grad(w).unwrap().clone();
        let eval = |t: Tensor| {
            let mut g = Graph::new();
            let w = g.param(t);
            let l = composite(&mut g, w, &a);
            g.value(l).item()
        };
        let h = 1e-6;
        for k in 0..w0.numel() {
            // Skip probes straddling the ReLU kink.
            if (w0.data()[k] * a.data()[k]).abs() < 1e-4 {
                continue;
            }
            let mut up = w0.clone();
            up.data_mut()[k] += h;
            let mut dn = w0.clone();
            dn.data_mut()[k] -= h;
            let fd = (eval(up) - eval(dn)) / (2.0 * h);
            let an = grad.data()[k];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            prop_assert!(rel < 1e-4, "index {}: {} vs {}", k, an, fd);
        }
    }

    #[test]
    fn backward_is_linear(seed in 0u64..10_000, ca in -3.0f64..3.0, cb in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w0 = random_tensor(&mut rng, &[3, 3], -1.0, 1.0);
        let a = random_tensor(&mut rng, &[3, 3], -1.0, 1.0);
        let grad_of = |f: &dyn Fn(&mut Graph, Var) -> Var| {
            let mut g = Graph::new();
            let w = g.param(w0.clone());
            let l = f(&mut g, w);
            g.backward(l).unwrap();
            g.grad(w).unwrap().clone()
        };
        let l1 = |g: &mut Graph, w: Var| composite(g, w, &a);
        let l2 = |g: &mut Graph, w: Var| {
            let sq = g.mul(w, w).unwrap();
            g.sum(sq).unwrap()
        };
        let both = |g: &mut Graph, w: Var| {
            let x = l1(g, w);
            let y = l2(g, w);
            let x = g.mul_const(x, ca).unwrap();
            let y = g.mul_const(y, cb).unwrap();
            g.add(x, y).unwrap()
        };
        let (g1, g2, g12) = (grad_of(&l1), grad_of(&l2), grad_of(&both));
        for k in 0..9 {
            let want = ca * g1.data()[k] + cb * g2.data()[k];
            prop_assert!((g12.data()[k] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn clc_is_non_negative(seed in 0u64..10_000, scale in 0.0f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let t = g.constant(random_tensor(&mut rng, &[3, 6], -scale - 1e-3, scale + 1e-3));
        let s = g.param(random_tensor(&mut rng, &[3, 6], -scale - 1e-3, scale + 1e-3));
        let clc = clc_loss(&mut g, &[("a".into(), t)], &[("a".into(), s)]).unwrap();
        prop_assert!(g.value(clc.total).item() >= -1e-9);
    }
}

#[test]
fn grad_scale_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for bits in [2, 3, 4, 8] {
        let n = 64;
        let spec = QuantSpec::new(bits, QuantMode::WeightSigned)
            .unwrap()
            .with_scale(0.3)
            .with_grad_factor_for(n);
        let x = random_tensor(&mut rng, &[n], -3.0, 3.0);
        let up = random_tensor(&mut rng, &[n], -1.0, 1.0);
        let (_, gs) = quantize_backward(&up, &x, &spec);
        let (qn, qp) = (2f64.powi(bits as i32 - 1), 2f64.powi(bits as i32 - 1) - 1.0);
        let mut want = 0.0;
        for i in 0..n {
            let v = x.data()[i] / 0.3;
            let d = if v < -qn {
                -qn
            } else if v > qp {
                qp
            } else {
                v.round_ties_even() - v
            };
            want += up.data()[i] * d;
        }
        want /= (n as f64 * qp).sqrt();
        assert!((gs - want).abs() < 1e-9, "bits {bits}: {gs} vs {want}");
    }
}

#[test]
fn init_scale_matches_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for bits in [2, 4, 8] {
        let spec = QuantSpec::new(bits, QuantMode::WeightSigned).unwrap();
        let v = random_tensor(&mut rng, &[37], -2.0, 2.0);
        let mean_abs = v.data().iter().map(|x| x.abs()).sum::<f64>() / 37.0;
        let want = 2.0 * mean_abs / (2f64.powi(bits as i32 - 1) - 1.0).sqrt();
        assert!((init_scale(&v, &spec) - want).abs() < 1e-9);
    }
}

#[test]
fn ce_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits = random_tensor(&mut rng, &[8, 5], -3.0, 3.0);
    let labels: Vec<usize> = (0..8).map(|_| rng.random_range(0..5)).collect();
    let mut g = Graph::new();
    let lv = g.constant(logits.clone());
    let p = g.softmax(lv).unwrap();
    let ce = ce_loss(&mut g, p, &labels).unwrap();
    let want = (0..8)
        .map(|r| -(softmax_row(logits.row(r))[labels[r]] + 1e-12).ln())
        .sum::<f64>()
        / 8.0;
    assert!((g.value(ce).item() - want).abs() < 1e-9);
}

#[test]
fn total_gradient_decomposes() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w0 = random_tensor(&mut rng, &[4, 3], -1.0, 1.0);
    let x = random_tensor(&mut rng, &[5, 4], -1.0, 1.0);
    let teacher_logits = random_tensor(&mut rng, &[5, 3], -2.0, 2.0);
    let teacher_tap = random_tensor(&mut rng, &[5, 3], -2.0, 2.0);
    let beta = 2.5;
    // 0 = kd only, 1 = clc only, 2 = total.
    let loss_value = |which: usize, w: &Tensor| -> (f64, Tensor) {
        let mut g = Graph::new();
        let wv = g.param(w.clone());
        let xv = g.constant(x.clone());
        let z = g.matmul(xv, wv).unwrap();
        let p = g.softmax(z).unwrap();
        let tl = g.constant(teacher_logits.clone());
        let tp = g.softmax(tl).unwrap();
        let tt = g.constant(teacher_tap.clone());
        let kd = kd_loss(&mut g, tp, p).unwrap();
        let clc = clc_loss(&mut g, &[("t".into(), tt)], &[("t".into(), z)]).unwrap().total;
        let out = match which {
            0 => kd,
            1 => clc,
            _ => total_loss(&mut g, kd, clc, beta).unwrap(),
        };
        g.backward(out).unwrap();
        (g.value(out).item(), g.grad(wv).unwrap().clone())
    };
    let (_, gk) = loss_value(0, &w0);
    let (_, gc) = loss_value(1, &w0);
    let (_, gt) = loss_value(2, &w0);
    let h = 1e-6;
    for k in 0..w0.numel() {
        assert!((gt.data()[k] - (gk.data()[k] + beta * gc.data()[k])).abs() < 1e-9);
        let mut up = w0.clone();
        up.data_mut()[k] += h;
        let mut dn = w0.clone();
        dn.data_mut()[k] -= h;
        let fd = (loss_value(2, &up).0 - loss_value(2, &dn).0) / (2.0 * h);
        assert!((fd - gt.data()[k]).abs() / fd.abs().max(1e-6) < 1e-4);
    }
}

#[test]
fn teacher_receives_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::new();
    let t = g.param(random_tensor(&mut rng, &[4, 3], -1.0, 1.0));
    let s = g.param(random_tensor(&mut rng, &[4, 3], -1.0, 1.0));
    let tp = g.softmax(t).unwrap();
    let sp = g.softmax(s).unwrap();
    let kd = kd_loss(&mut g, tp, sp).unwrap();
    let clc = clc_loss(&mut g, &[("a".into(), t)], &[("a".into(), s)]).unwrap().total;
    let total = total_loss(&mut g, kd, clc, 3.0).unwrap();
    g.backward(total).unwrap();
    assert!(g.grad(t).is_none_or(|gr| gr.data().iter().all(|&v| v == 0.0)));
    assert!(g.grad(s).unwrap().data().iter().any(|&v| v != 0.0));
}

#[test]
fn batched_scores_match_single_item_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let def = ModelDef::mlp(3, &[6], 4);
    let student = ModelInstance::init(def.clone(), 1).unwrap();
    let teacher = ModelInstance::init(def, 2).unwrap();
    let x = random_tensor(&mut rng, &[20, 3], -2.0, 2.0);
    let labels: Vec<usize> = (0..20).map(|_| rng.random_range(0..4)).collect();
    let data = Dataset::new(x, labels.clone(), 4).unwrap();
    let pass = ScoringPass {
        epoch: 3,
        total_epochs: 10,
        batch_size: 7,
        mask: MetricMask::ALL,
    };
    let mut work = WorkCounter::default();
    let scores = score_dataset(&student, &teacher, &data, pass, &mut work).unwrap();
    assert_eq!(work.selection_forwards, 2 * 3);
    assert_eq!(scores.len(), 20);
    for (i, s) in scores.iter().enumerate() {
        assert_eq!(s.sample_id, i);
        let xi = Tensor::new(vec![1, 3], data.sample(i).to_vec()).unwrap();
        let pq = student.forward(&xi).unwrap().probs;
        let pf = teacher.forward(&xi).unwrap().probs;
        let (pq, pf) = (pq.row(0), pf.row(0));
        assert!((s.evs - score_evs(pq, labels[i]).unwrap()).abs() < 1e-12);
        assert!((s.ds - score_ds(pq, pf).unwrap()).abs() < 1e-12);
        assert!((s.res - score_res(pq, pf).unwrap()).abs() < 1e-12);
    }
}
