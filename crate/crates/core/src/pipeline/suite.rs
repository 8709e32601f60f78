use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, Graph, Mode, NodeId};
use crate::cdg::CdgParams;
use crate::error::Result;
use crate::labels::LabelMap;
use crate::loss::{cdg_loss_node, cross_entropy, total_loss_node, LossWeights};
use crate::nn::{Conv2d, Params, Role};
use crate::tensor::Tensor;

pub const SUITE_SIZE: usize = 8;
pub const SUITE_CLASSES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckRow {
    pub param: String,
    pub max_rel_err: f64,
}

/// A CDG module followed by a 3x3 classifier on a random `8x8x8` feature map,
/// trained against a random label map with the full parsing + CDG objective.
pub struct GradCheckProblem {
    pub graph: Graph<f64>,
    pub loss: NodeId,
    pub params: Vec<String>,
}

pub fn gradcheck_problem(seed: u64) -> Result<GradCheckProblem> {
    let (s, n) = (SUITE_SIZE, SUITE_CLASSES);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cdg: CdgParams<f64> = CdgParams::init(s, n, &mut rng)?;
    let decoder: Conv2d<f64> = Conv2d::init(&mut rng, 3, s, n, 1);
    let x: Vec<f64> = (0..s * s * s).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let label = LabelMap::new(
        s,
        s,
        n,
        (0..s * s).map(|_| rng.gen_range(0..n as u8)).collect(),
    )?;

    let mut g = Graph::new();
    let xi = g.constant(Tensor::new(&[s, s, s], x)?);
    let out = cdg.forward(&mut g, "cdg", xi, Mode::Train)?;
    let logits = decoder.forward(&mut g, "decoder", out.x_o)?;
    let ce = cross_entropy(&mut g, logits, core::slice::from_ref(&label), None)?;
    let (gh, gv) = label.distributions(true);
    let w = LossWeights::default();
    let cdg_term = cdg_loss_node(&mut g, out.p_h, out.p_v, gh.to_tensor(), gv.to_tensor(), &w)?;
    let loss = total_loss_node(&mut g, ce, None, Some(cdg_term), &w)?;

    let mut params = Vec::new();
    let mut collect = |name: &str, _: &Tensor<f64>, role: Role| {
        if role == Role::Trainable {
            params.push(String::from(name));
        }
    };
    cdg.visit("cdg", &mut collect);
    decoder.visit("decoder", &mut collect);
    Ok(GradCheckProblem {
        graph: g,
        loss,
        params,
    })
}

/// Maximum relative gradient error of every trainable parameter of the problem.
pub fn gradcheck_suite(seed: u64, h: f64) -> Result<Vec<GradCheckRow>> {
    let p = gradcheck_problem(seed)?;
    p.params
        .iter()
        .map(|name| {
            Ok(GradCheckRow {
                param: name.clone(),
                max_rel_err: grad_check(&p.graph, p.loss, name, h)?,
            })
        })
        .collect()
}
