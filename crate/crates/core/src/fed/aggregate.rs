use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `base + Σ wⱼ · (setⱼ − base)`. Written as a correction to `base` so that
/// identical inputs come back bit-exact whatever the weights.
pub fn mix<T: Scalar>(base: &ParamSet<T>, others: &[(&ParamSet<T>, T)]) -> Result<ParamSet<T>> {
    for (s, _) in others {
        base.ensure_conforms(s)?;
    }
    let mut out = ParamSet::new();
    for (i, (name, t)) in base.iter().enumerate() {
        let mut data = t.data().to_vec();
        for (s, w) in others {
            for (d, (&x, &b)) in data.iter_mut().zip(s.tensor_at(i).data().iter().zip(t.data())) {
                // Equal entries are skipped so a signed zero survives.
                if x != b {
                    *d += *w * (x - b);
                }
            }
        }
        out.push(name, Tensor::new(t.shape(), data)?)?;
    }
    Ok(out)
}

/// `nᵢ / Σn`.
pub fn fedavg_weights(sizes: &[usize]) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::contract("aggregating zero models"));
    }
    if sizes.contains(&0) {
        return Err(Error::contract("every client needs at least one sample"));
    }
    let total: usize = sizes.iter().sum();
    Ok(sizes.iter().map(|&n| n as f64 / total as f64).collect())
}

/// Data-size weighted mean of the client models.
pub fn aggregate_fedavg<T: Scalar>(models: &[(&ParamSet<T>, usize)]) -> Result<ParamSet<T>> {
    let sizes: Vec<usize> = models.iter().map(|m| m.1).collect();
    let w = fedavg_weights(&sizes)?;
    let (base, _) = models[0];
    let others: Vec<(&ParamSet<T>, T)> = models[1..].iter().zip(&w[1..]).map(|(m, &w)| (m.0, T::cst(w))).collect();
    mix(base, &others)
}

/// Row `i` holds client `i`'s mixing weights: `θᵢ` on the diagonal and
/// `ωⱼ = (1 − θᵢ) · nⱼ / Σ_{k≠i} nₖ` elsewhere.
pub fn pfedprox_weights(sizes: &[usize], thetas: &[f64]) -> Result<Vec<Vec<f64>>> {
    fedavg_weights(sizes)?;
    if thetas.len() != sizes.len() {
        return Err(Error::contract(format!("{} thetas for {} clients", thetas.len(), sizes.len())));
    }
    if let Some(t) = thetas.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::contract(format!("theta {t} outside [0, 1]")));
    }
    if sizes.len() == 1 && thetas[0] < 1.0 {
        return Err(Error::contract("a single client has no peers to mix with"));
    }
    let total: usize = sizes.iter().sum();
    Ok((0..sizes.len())
        .map(|i| {
            let peers = (total - sizes[i]) as f64;
            (0..sizes.len())
                .map(|j| {
                    if i == j {
                        thetas[i]
                    } else {
                        (1.0 - thetas[i]) * sizes[j] as f64 / peers
                    }
                })
                .collect()
        })
        .collect())
}

/// One personalised initialisation per client from a shared `θ`.
pub fn aggregate_pfedprox<T: Scalar>(models: &[(&ParamSet<T>, usize)], theta: f64) -> Result<Vec<ParamSet<T>>> {
    aggregate_pfedprox_with(models, &vec![theta; models.len()])
}

/// As [`aggregate_pfedprox`] with a per-client `θᵢ`.
pub fn aggregate_pfedprox_with<T: Scalar>(models: &[(&ParamSet<T>, usize)], thetas: &[f64]) -> Result<Vec<ParamSet<T>>> {
    let sizes: Vec<usize> = models.iter().map(|m| m.1).collect();
    let weights = pfedprox_weights(&sizes, thetas)?;
    weights
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let others: Vec<(&ParamSet<T>, T)> = (0..models.len())
                .filter(|&j| j != i)
                .map(|j| (models[j].0, T::cst(row[j])))
                .collect();
            mix(models[i].0, &others)
        })
        .collect()
}

/// `(α/2)·‖W − W_t‖²`.
pub fn proximal_term<T: Scalar>(params: &ParamSet<T>, anchor: &ParamSet<T>, alpha: f64) -> Result<T> {
    Ok(T::cst(alpha / 2.0) * params.squared_distance(anchor)?)
}

/// Adds `α·(W − W_t)` to every gradient slot and returns the proximal term.
pub fn apply_proximal<T: Scalar>(params: &mut ParamSet<T>, anchor: &ParamSet<T>, alpha: f64) -> Result<T> {
    let value = proximal_term(params, anchor, alpha)?;
    if alpha == 0.0 {
        return Ok(value);
    }
    let a = T::cst(alpha);
    for (i, (_, t)) in params.iter_mut().enumerate() {
        let g: Vec<T> = t
            .data()
            .iter()
            .zip(anchor.tensor_at(i).data())
            .map(|(&w, &w0)| a * (w - w0))
            .collect();
        t.accumulate_grad(&g);
    }
    Ok(value)
}
