mod common;

use cfa::backbone::{BackboneConfig, Preset};
use cfa::cascade::CascadeConfig;
use cfa::cascade::CascadeModel;
use cfa::graph::{Graph, Mode};
use cfa::heatmap::FusionMode;
use cfa::params::ParamStore;
use cfa::tensor::Tensor;
use cfa::trainer::{Adam, TrainConfig};
use common::*;

#[test]
fn cascade_loss_gradients_match_finite_differences() {
    let mut model = mini_cascade(2, 11);
    jitter(model.store_mut(), 12);
    let problem = LossProblem::random(&model, 2, 64, 13);
    let grads = problem.gradients(&model);
    let picks = sample_params(model.store(), &CASCADE_GROUPS, 9, 14);
    let checks = finite_difference_check(&mut model, |m| problem.loss(m), &grads, &picks);
    assert!(checks.iter().filter(|c| c.step.is_some()).count() >= 50);
    for c in checks.iter().filter(|c| c.step.is_some()) {
        assert!(c.rel_error <= 1e-4, "{c:?}");
    }
}

#[test]
fn fused_map_gradient_reaches_the_stem() {
    let mut model = mini_cascade(2, 21);
    model.set_fusion(2, FusionMode::Eq5).unwrap();
    jitter(model.store_mut(), 22);
    let mut r = rng(23);
    let images = random_tensor(&[2, 3, 64, 64], 0.0, 1.0, &mut r);
    let target = random_tensor(&[2, 16, 16, 16], 0.0, 1.0, &mut r);
    let mask = vec![true; 32];
    let loss = |m: &CascadeModel| {
        let mut g = Graph::new(m.store(), Mode::Train);
        let x = g.input(images.clone());
        let nodes = m.forward(&mut g, x).unwrap();
        let f = m.fused(&mut g, &nodes).unwrap();
        let l = g.masked_mse(f, &target, &mask).unwrap();
        (g.value(l).data()[0], g.switch_pattern(), g.backward(l).unwrap().into_params())
    };
    let (_, _, grads) = loss(&model);
    let picks = sample_params(model.store(), &["stage0.stem.", ".phi4."], 3, 24);
    let checks = finite_difference_check(&mut model, |m| { let (v, p, _) = loss(m); (v, p) }, &grads, &picks);
    for c in checks.iter().filter(|c| c.step.is_some()) {
        assert!(c.rel_error <= 1e-4, "{c:?}");
    }
}

/// Direct 1×1 convolution by explicit loops.
fn pointwise(store: &ParamStore, conv: &cfa::layers::Conv2d, x: &Tensor) -> Tensor {
    let (n, cin, h, w) = x.dims4().unwrap();
    let wt = store.get(conv.weight).data();
    let bias = conv.bias.map(|b| store.get(b).data().to_vec());
    let cout = conv.out_channels;
    let mut out = vec![0.0; n * cout * h * w];
    for b in 0..n {
        for o in 0..cout {
            for p in 0..h * w {
                let mut s = bias.as_ref().map_or(0.0, |v| v[o]);
                for i in 0..cin {
                    s += wt[o * cin + i] * x.data()[(b * cin + i) * h * w + p];
                }
                out[(b * cout + o) * h * w + p] = s;
            }
        }
    }
    Tensor::from_vec(&[n, cout, h, w], out).unwrap()
}

#[test]
fn stage_input_and_output_match_scalar_loops() {
    let mut model = mini_cascade(2, 31);
    jitter(model.store_mut(), 32);
    let mut r = rng(33);
    let agg = model.aggregator(1).unwrap().clone();
    let mut g = Graph::new(model.store(), Mode::Eval);
    let x = g.input(random_tensor(&[2, 3, 64, 64], 0.0, 1.0, &mut r));
    let prev = model.stage(0).forward(&mut g, x).unwrap();
    let a1 = agg.stage_input(&mut g, &prev).unwrap();
    let a3 = g.input(random_tensor(&[2, 16, 16, 16], -1.0, 1.0, &mut r));
    let y = agg.stage_output(&mut g, a3, prev.y).unwrap();

    let store = model.store();
    let phi4 = pointwise(store, agg.phi4(), g.value(prev.y));
    for ((yv, a3v), pv) in g.value(y).data().iter().zip(g.value(a3).data()).zip(phi4.data()) {
        assert!((yv - (a3v + pv.max(0.0))).abs() <= 1e-6);
    }
    // φ2 is a deconvolution stack, taken from its own graph; φ1 and φ3 are looped.
    let phi1 = pointwise(store, agg.phi1(), g.value(prev.a1));
    let phi3 = pointwise(store, agg.phi3(), g.value(prev.y));
    let mut g2 = Graph::new(store, Mode::Eval);
    let a2 = g2.input(g.value(prev.a2).clone());
    let phi2 = agg.phi2(&mut g2, a2).unwrap();
    let expect: Vec<f64> = phi1
        .data()
        .iter()
        .zip(phi3.data())
        .zip(g2.value(phi2).data())
        .map(|((a, b), c)| a + b + c)
        .collect();
    for (got, want) in g.value(a1).data().iter().zip(&expect) {
        assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
    }
}

#[test]
fn every_parameter_receives_gradient_after_one_step() {
    let mut model = mini_cascade(2, 41);
    let problem = LossProblem::random(&model, 2, 64, 42);
    let cfg = TrainConfig::default();
    let mut adam = Adam::new(cfg.beta1, cfg.beta2, cfg.adam_eps);
    let grads = problem.gradients(&model);
    adam.update(model.store_mut(), &grads, 1e-3);
    let grads = problem.gradients(&model);
    for id in model.store().trainable_ids() {
        let max = grads[id.index()].as_ref().map_or(0.0, Tensor::max_abs);
        assert!(max > 0.0, "{} has no gradient", model.store().entry(id).name);
    }
}

#[test]
fn single_stage_cascade_is_the_backbone() {
    let model = mini_cascade(1, 51);
    let mut r = rng(52);
    let images = random_tensor(&[2, 3, 64, 64], 0.0, 1.0, &mut r);
    let out = model.predict(&images).unwrap();
    let mut g = Graph::new(model.store(), Mode::Eval);
    let x = g.input(images);
    let t = model.stage(0).forward(&mut g, x).unwrap();
    assert_eq!(g.value(t.y), &out.stage_heatmaps[0]);
    // A one-map window reduces to |y|.
    assert_eq!(out.fused, out.stage_heatmaps[0].map(f64::abs));
    let cfg = CascadeConfig::uniform(Preset::Mini, 1, 16);
    assert_eq!(cfg.stages[0], BackboneConfig::preset(Preset::Mini, 16));
}
