use crate::data::{Role, TranslationExample};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Var};

/// Loss nodes for one example: `total = λ·ae + mt`, all unnormalized sums.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub ae: Var,
    pub mt: Var,
}

fn masks<T: Float>(roles: &[Role], lambda: f64, scale: f64) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut ae = Vec::with_capacity(roles.len());
    let mut mt = Vec::with_capacity(roles.len());
    let mut total = Vec::with_capacity(roles.len());
    for r in roles {
        let (a, m) = match r {
            Role::Ae => (1.0, 0.0),
            Role::Mt => (0.0, 1.0),
            Role::None => (0.0, 0.0),
        };
        ae.push(T::lit(a));
        mt.push(T::lit(m));
        total.push(T::lit((lambda * a + m) * scale));
    }
    (ae, mt, total)
}

/// Scores `logits` (`[N-1 × V]`, one row per prediction) against `example`.
pub fn compute_loss<T: Float>(tape: &mut Tape<T>, logits: Var, example: &TranslationExample, lambda: f64) -> Result<LossParts> {
    let rows = tape.shape(logits).first().copied().unwrap_or(0);
    if rows != example.roles.len() {
        return Err(Error::contract(format!(
            "{} logit rows for {} loss roles",
            rows,
            example.roles.len()
        )));
    }
    let targets = example.targets();
    let (ae_w, mt_w, total_w) = masks::<T>(&example.roles, lambda, 1.0);
    Ok(LossParts {
        ae: tape.cross_entropy(logits, targets, &ae_w)?,
        mt: tape.cross_entropy(logits, targets, &mt_w)?,
        total: tape.cross_entropy(logits, targets, &total_w)?,
    })
}

/// Batch loss normalized by the batch's MT-position count:
/// `(λ·Σ ae + Σ mt) / n_mt`.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub total: Var,
    /// Σ ae / n_mt
    pub ae: f64,
    /// Σ mt / n_mt
    pub mt: f64,
    pub n_ae: usize,
    pub n_mt: usize,
}

pub fn batch_loss<T: Float>(tape: &mut Tape<T>, logits: Var, targets: &[usize], roles: &[Role], lambda: f64) -> Result<BatchLoss> {
    let rows = tape.shape(logits).first().copied().unwrap_or(0);
    if rows != roles.len() || rows != targets.len() {
        return Err(Error::contract(format!(
            "{} logit rows for {} roles and {} targets",
            rows,
            roles.len(),
            targets.len()
        )));
    }
    let n_ae = roles.iter().filter(|r| **r == Role::Ae).count();
    let n_mt = roles.iter().filter(|r| **r == Role::Mt).count();
    if n_mt == 0 {
        return Err(Error::contract("batch has no translation positions"));
    }
    let scale = 1.0 / n_mt as f64;
    let (ae_w, mt_w, total_w) = masks::<T>(roles, lambda, scale);
    let total = tape.cross_entropy(logits, targets, &total_w)?;
    let (ae_sum, mt_sum) = {
        let nll = row_nll(tape.value(logits), tape.shape(logits)[1], targets);
        let dot = |w: &[T]| nll.iter().zip(w).map(|(l, w)| l * w.as_f64()).sum::<f64>();
        (dot(&ae_w), dot(&mt_w))
    };
    Ok(BatchLoss {
        total,
        ae: ae_sum * scale,
        mt: mt_sum * scale,
        n_ae,
        n_mt,
    })
}

/// Per-row negative log-likelihood of `targets`, computed in f64.
pub fn row_nll<T: Float>(logits: &[T], vocab: usize, targets: &[usize]) -> Vec<f64> {
    logits
        .chunks(vocab)
        .zip(targets)
        .map(|(row, &t)| {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
            let lse = row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln() + max;
            lse - row[t].as_f64()
        })
        .collect()
}
