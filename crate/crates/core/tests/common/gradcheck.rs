//! Central-difference gradient checks through a 10-parameter stub network.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fewshot_gan::data::{Domain, ImageSample, PairedDataset};
use fewshot_gan::losses::{
    appearance_recon_loss, hinge_d_loss, hinge_g_loss, image_recon_loss, kl_loss, perceptual_loss,
    relation_gen_loss, relation_train_loss, ContentCodes, RelationPair,
};
use fewshot_gan::nets::PosteriorVars;
use fewshot_gan::tensor::{Array, Graph, Var};

pub const EPS: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-3;
pub const TRIALS: usize = 20;
pub const BATCH: usize = 4;

/// Fixed inputs and targets of one trial.
pub struct Trial {
    pub input: Array<f64>,
    pub other: Array<f64>,
    pub feature_w: Array<f64>,
}

impl Trial {
    pub fn draw(rng: &mut ChaCha8Rng) -> Self {
        let mut a = |shape: &[usize]| {
            let n = shape.iter().product();
            Array::from_vec(shape, (0..n).map(|_| rng.random_range(-1.5..1.5)).collect())
        };
        Self {
            input: a(&[BATCH, 2]),
            other: a(&[BATCH, 5]),
            feature_w: a(&[5, 3]),
        }
    }
}

/// `tanh(input · θ)` with `θ` a `[2, 5]` parameter: `[BATCH, 5]` outputs.
pub fn stub<'g>(g: &'g Graph<f64>, theta: &Arc<Array<f64>>, t: &Trial) -> Var<'g, f64> {
    let w = g.param("theta", theta);
    g.constant(t.input.clone()).matmul(w).tanh()
}

pub type LossFn = dyn for<'g> Fn(&'g Graph<f64>, Var<'g, f64>, &Trial) -> Var<'g, f64>;

pub fn loss_value(theta: &Array<f64>, t: &Trial, loss: &LossFn) -> f64 {
    let g = Graph::new();
    let out = stub(&g, &Arc::new(theta.clone()), t);
    loss(&g, out, t).item()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-8 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Runs `TRIALS` checks. A draw whose central difference changes with the
/// step size sits on a kink of `abs`/`relu` and is redrawn.
pub fn check(name: &str, loss: &LossFn) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(name.bytes().map(u64::from).sum());
    let mut done = 0;
    let mut attempts = 0;
    while done < TRIALS {
        attempts += 1;
        if attempts > 10 * TRIALS {
            return Err(format!("{name}: too many kink draws"));
        }
        let t = Trial::draw(&mut rng);
        let theta = Array::from_vec(
            &[2, 5],
            (0..10).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );

        let g = Graph::new();
        let out = stub(&g, &Arc::new(theta.clone()), &t);
        let grads = g.backward(loss(&g, out, &t));
        let analytic = grads.get("theta").expect("theta gradient").clone();

        let central = |k: usize, eps: f64| {
            let mut plus = theta.clone();
            plus.data_mut()[k] += eps;
            let mut minus = theta.clone();
            minus.data_mut()[k] -= eps;
            (loss_value(&plus, &t, loss) - loss_value(&minus, &t, loss)) / (2.0 * eps)
        };
        let numeric: Vec<f64> = (0..10).map(|k| central(k, EPS)).collect();
        let kinked = (0..10).any(|k| rel_err(numeric[k], central(k, EPS / 2.0)) > REL_TOL / 10.0);
        if kinked {
            continue;
        }
        for k in 0..10 {
            let a = analytic.data()[k];
            if rel_err(a, numeric[k]) > REL_TOL {
                return Err(format!(
                    "{name}, trial {done}, param {k}: analytic {a} vs numeric {}",
                    numeric[k]
                ));
            }
        }
        done += 1;
    }
    Ok(())
}

fn flat_dataset(n: usize) -> PairedDataset {
    let img = |v: f32, domain| ImageSample::new(Array::full(&[4, 4, 3], v), domain).unwrap();
    PairedDataset::new(
        (0..n)
            .map(|i| img(i as f32 / n as f32, Domain::Source))
            .collect(),
        (0..n)
            .map(|i| img(i as f32 / n as f32, Domain::Target))
            .collect(),
        (0..n).collect(),
    )
    .unwrap()
}

/// Every loss, wired to the stub network's outputs.
pub fn cases() -> Vec<(&'static str, Box<LossFn>)> {
    let d = flat_dataset(BATCH);
    let codes = ContentCodes::new(Array::from_vec(
        &[BATCH, 3],
        (0..3 * BATCH).map(|i| (i % 7) as f32 * 0.3).collect(),
    ));
    let pairs: Vec<RelationPair> = (0..BATCH)
        .map(|k| RelationPair {
            source: k,
            target: (k + 1) % BATCH,
        })
        .collect();
    vec![
        (
            "image_recon",
            Box::new(|g, out, t| image_recon_loss(out, g.constant(t.other.clone())).unwrap()),
        ),
        (
            "kl",
            Box::new(|_, out, _| {
                let q = PosteriorVars {
                    mean: out.slice_last(0, 2),
                    logvar: out.slice_last(2, 2).scale(2.0),
                };
                kl_loss(&q).unwrap()
            }),
        ),
        (
            "perceptual",
            Box::new(|g, out, t| {
                let w = g.constant(t.feature_w.clone());
                perceptual_loss(out, g.constant(t.other.clone()), |x| {
                    x.matmul(w).leaky_relu(0.2)
                })
                .unwrap()
            }),
        ),
        (
            "appearance_recon",
            Box::new(|g, out, t| appearance_recon_loss(out, g.constant(t.other.clone())).unwrap()),
        ),
        (
            "hinge_d",
            Box::new(|_, out, _| {
                let real = out.slice_last(0, 2).scale(2.0);
                let fake = out.slice_last(2, 3).scale(2.0);
                hinge_d_loss(real, fake).unwrap()
            }),
        ),
        ("hinge_g", Box::new(|_, out, _| hinge_g_loss(out).unwrap())),
        (
            "relation_train",
            Box::new(move |_, out, _| {
                let scores = out.slice_last(0, 1).scale(3.0).reshape(&[BATCH]);
                relation_train_loss(scores, &pairs, &d, &codes).unwrap()
            }),
        ),
        (
            "relation_gen",
            Box::new(|_, out, t| {
                let src = Array::from_vec(&[BATCH, 2], t.other.data()[..2 * BATCH].to_vec());
                let tar =
                    Array::from_vec(&[BATCH, 2], t.other.data()[2 * BATCH..4 * BATCH].to_vec());
                let idx: Vec<(usize, usize)> = (0..BATCH).map(|k| (k, (k + 1) % BATCH)).collect();
                let scores = out.slice_last(1, 1).scale(3.0).reshape(&[BATCH]);
                relation_gen_loss(scores, &src, &tar, &idx).unwrap()
            }),
        ),
    ]
}
