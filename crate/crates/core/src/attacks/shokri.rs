use super::{AttackError, AttackScores, ConfidenceRecord};

const MIN_CLASS_EXAMPLES: usize = 10;
const ITERS: usize = 500;
const LEARNING_RATE: f64 = 2.0;
const RIDGE: f64 = 1e-3;

fn features(probs: &[f64]) -> Vec<f64> {
    let mut f = probs.to_vec();
    f.sort_by(|a, b| b.total_cmp(a));
    f.push(1.0);
    f
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Ridge-regularized logistic regression by full-batch gradient descent.
fn fit(xs: &[Vec<f64>], ys: &[bool]) -> Vec<f64> {
    let d = xs[0].len();
    let n = xs.len() as f64;
    let mut w = vec![0.0; d];
    for _ in 0..ITERS {
        let mut g = vec![0.0; d];
        for (x, &y) in xs.iter().zip(ys) {
            let p = sigmoid(x.iter().zip(&w).map(|(a, b)| a * b).sum());
            let r = p - f64::from(u8::from(y));
            for (gj, xj) in g.iter_mut().zip(x) {
                *gj += r * xj / n;
            }
        }
        for j in 0..d {
            let reg = if j + 1 < d { RIDGE * w[j] } else { 0.0 };
            w[j] -= LEARNING_RATE * (g[j] + reg);
        }
    }
    w
}

/// One logistic-regression attack model per class, trained on shadow
/// confidence vectors sorted in descending order; the score is the
/// predicted member probability. Classes with fewer than ten shadow examples
/// (or only one membership label) use a pooled model and are flagged.
pub fn shokri_attack(shadow: &[ConfidenceRecord], target: &[ConfidenceRecord]) -> Result<AttackScores, AttackError> {
    if shadow.is_empty() {
        return Err(AttackError::Input("no shadow records".into()));
    }
    let width = shadow[0].probs.len();
    if shadow.iter().chain(target).any(|r| r.probs.len() != width) {
        return Err(AttackError::Input("confidence vectors differ in length".into()));
    }
    let xs: Vec<Vec<f64>> = shadow.iter().map(|r| features(&r.probs)).collect();
    let ys: Vec<bool> = shadow.iter().map(|r| r.is_member).collect();
    if ys.iter().all(|&y| y) || ys.iter().all(|&y| !y) {
        return Err(AttackError::SingleClass);
    }
    let global = fit(&xs, &ys);
    let mut models: Vec<Option<Vec<f64>>> = vec![None; width];
    let mut out = AttackScores::default();
    for c in 0..width {
        let idx: Vec<usize> = (0..shadow.len()).filter(|&i| shadow[i].label == c).collect();
        let both = idx.iter().any(|&i| ys[i]) && idx.iter().any(|&i| !ys[i]);
        if idx.len() >= MIN_CLASS_EXAMPLES && both {
            let cx: Vec<Vec<f64>> = idx.iter().map(|&i| xs[i].clone()).collect();
            let cy: Vec<bool> = idx.iter().map(|&i| ys[i]).collect();
            models[c] = Some(fit(&cx, &cy));
        } else if target.iter().any(|r| r.label == c) {
            out.flags.push(format!("class {c}: {} shadow examples, pooled attack model used", idx.len()));
        }
    }
    for (i, r) in target.iter().enumerate() {
        let w = models.get(r.label).and_then(Option::as_ref).unwrap_or(&global);
        let x = features(&r.probs);
        out.push(i, sigmoid(x.iter().zip(w).map(|(a, b)| a * b).sum()), r.is_member);
    }
    Ok(out)
}
