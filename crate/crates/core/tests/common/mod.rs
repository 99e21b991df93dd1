#![allow(dead_code)]

use gradinterp::datasets::Labels;
use gradinterp::diffcore::{Graph, Tensor};
use gradinterp::losses::{gi_objective, predict, Batch, LossSpec};
use gradinterp::temporal_nn::{
    MlpSpec, Model, ModelSpec, PerFeatureSpec, TemporalModel, TimeFeatures,
};

pub fn small_mlp() -> ModelSpec {
    ModelSpec::Mlp(MlpSpec {
        input_dim: 2,
        hidden: vec![6, 5],
        output_dim: 2,
        time: Some(TimeFeatures {
            m: 4,
            m_p: 1,
            trelu: vec![true, true],
            trelu_width: 3,
        }),
    })
}

pub fn small_per_feature() -> ModelSpec {
    ModelSpec::PerFeature(PerFeatureSpec {
        features: 2,
        hidden: vec![5, 4],
        time_invariant: false,
    })
}

pub fn batch(x: &[f64], t: &[f64], y: &[usize]) -> Batch {
    let n = t.len();
    Batch::new(
        Tensor::new(n, 2, x.to_vec()).unwrap(),
        Tensor::column(t.to_vec()),
        Labels::Class(y.to_vec()),
    )
    .unwrap()
}

/// `∂F/∂t` from the forward-mode channel.
pub fn tangent(model: &Model, b: &Batch) -> Tensor {
    let mut g = Graph::new();
    let x = g.constant(b.x.clone()).unwrap();
    let t = g.constant(b.t.clone()).unwrap();
    let t = g.time_input(t, true).unwrap();
    let out = model.forward(&mut g, x, t).unwrap();
    match out.tangent {
        Some(v) => g.value(v).clone(),
        None => Tensor::zeros(b.len(), model.output_dim()),
    }
}

pub fn shifted(b: &Batch, h: f64) -> Batch {
    Batch::new(b.x.clone(), b.t.map(|t| t + h), b.y.clone()).unwrap()
}

pub fn central(model: &Model, b: &Batch, h: f64) -> Tensor {
    let hi = predict(model, &shifted(b, h)).unwrap();
    let lo = predict(model, &shifted(b, -h)).unwrap();
    hi.zip_map(&lo, |a, c| (a - c) / (2.0 * h))
}

pub fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn gi_value<M: TemporalModel + ?Sized>(
    model: &M,
    b: &Batch,
    spec: &LossSpec,
    delta: f64,
) -> f64 {
    let mut g = Graph::new();
    let j = gi_objective(&mut g, model, b, spec, delta).unwrap();
    g.scalar(j)
}
