//! Central finite-difference check of [`Graph::backward`].

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::policy::PolicyModel;

/// Denominator floor for the relative error, so entries near zero are
/// compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

fn loss_value<F>(model: &PolicyModel, loss_fn: &F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(model);
    let l = loss_fn(&mut g)?;
    Ok(g.value(l))
}

/// Picks `n` indices: all of them when `n` covers the vector, otherwise half
/// from entries the analytic gradient touches and the rest uniformly.
fn choose_indices(analytic: &[f64], n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let total = analytic.len();
    if n >= total {
        return (0..total).collect();
    }
    let touched: Vec<usize> = (0..total).filter(|&i| analytic[i] != 0.0).collect();
    let from_touched = (n / 2).min(touched.len());
    let mut chosen: Vec<usize> = sample(rng, touched.len(), from_touched)
        .into_iter()
        .map(|i| touched[i])
        .collect();
    for i in sample(rng, total, n) {
        if chosen.len() >= n {
            break;
        }
        if !chosen.contains(&i) {
            chosen.push(i);
        }
    }
    chosen.sort_unstable();
    chosen
}

/// Compares `analytic` against central differences with step `h`.
pub fn compare_with_finite_differences<F>(
    model: &PolicyModel,
    loss_fn: F,
    analytic: &[f64],
    n_params_sampled: usize,
    tolerance: f64,
    h: f64,
    rng: &mut impl Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let indices = choose_indices(analytic, n_params_sampled, rng);
    let mut probe = model.clone();
    let mut entries = Vec::with_capacity(indices.len());
    for index in indices {
        let orig = probe.params()[index];
        probe.params_mut()[index] = orig + h;
        let up = loss_value(&probe, &loss_fn)?;
        probe.params_mut()[index] = orig - h;
        let down = loss_value(&probe, &loss_fn)?;
        probe.params_mut()[index] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[index];
        entries.push(GradCheckEntry {
            index,
            analytic: a,
            numeric,
            rel_err: relative_error(a, numeric),
        });
    }
    let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        entries,
        max_rel_err,
        tolerance,
        pass: max_rel_err <= tolerance,
    })
}

/// Runs `backward` on `loss_fn` and checks it against central differences
/// at step `1e-5`.
pub fn finite_difference_check<F>(
    model: &PolicyModel,
    loss_fn: F,
    n_params_sampled: usize,
    tolerance: f64,
    rng: &mut impl Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(model);
        let l = loss_fn(&mut g)?;
        g.backward(l)?
    };
    compare_with_finite_differences(model, loss_fn, analytic.values(), n_params_sampled, tolerance, 1e-5, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{ArchConfig, GruConfig, TabularConfig, TabularRow};
    use crate::vocab::Vocabulary;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tabular() -> PolicyModel {
        let vocab = Vocabulary::symbolic(3).unwrap();
        let v = vocab.size() as u32;
        let mut rows = vec![TabularRow::full(vec![0])];
        for a in 0..v {
            rows.push(TabularRow::full(vec![0, a]));
        }
        PolicyModel::init(vocab, 4, ArchConfig::Tabular(TabularConfig { rows, init_scale: 1.0 }), 3).unwrap()
    }

    fn nll(g: &mut Graph) -> Result<Var> {
        let a = g.score(&[0, 1, 2], 1)?;
        let b = g.score(&[0, 2, 0], 1)?;
        let all: Vec<Var> = a.into_iter().chain(b).collect();
        let m = g.mean(&all);
        Ok(g.neg(m))
    }

    #[test]
    fn tabular_nll_passes() {
        let m = tabular();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = finite_difference_check(&m, nll, usize::MAX, 1e-4, &mut rng).unwrap();
        assert!(r.pass, "max rel err {}", r.max_rel_err);
        assert_eq!(r.entries.len(), m.num_params());
    }

    #[test]
    fn neural_nll_passes() {
        let vocab = Vocabulary::symbolic(3).unwrap();
        let m = PolicyModel::init(vocab, 8, ArchConfig::Neural(GruConfig { embed_dim: 3, hidden_dim: 4, readout_dim: 3 }), 1).unwrap();
        let loss = |g: &mut Graph| -> Result<Var> {
            let a = g.score(&[0, 1, 2, 4, 3], 1)?;
            let s = g.sum(&a);
            Ok(g.neg(s))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = finite_difference_check(&m, loss, usize::MAX, 1e-4, &mut rng).unwrap();
        assert!(r.pass, "max rel err {}", r.max_rel_err);
    }

    #[test]
    fn quadratic_loss_has_parameter_gradient() {
        let m = tabular();
        let half_sq = |g: &mut Graph| -> Result<Var> {
            let s = g.model().params().iter().map(|t| t * t / 2.0).sum();
            Ok(g.constant(s))
        };
        let theta = m.params().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = compare_with_finite_differences(&m, half_sq, &theta, usize::MAX, 1e-6, 1e-5, &mut rng).unwrap();
        assert!(r.pass, "max rel err {}", r.max_rel_err);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let m = tabular();
        let mut g = Graph::new(&m);
        let l = nll(&mut g).unwrap();
        let mut analytic = g.backward(l).unwrap().0;
        let hit = analytic.iter().position(|&x| x != 0.0).unwrap();
        analytic[hit] += 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = compare_with_finite_differences(&m, nll, &analytic, usize::MAX, 1e-4, 1e-5, &mut rng).unwrap();
        assert!(!r.pass);
    }
}
