use ndarray::ArrayView2;

use super::ClassifierOutput;
use crate::data::LabelDistribution;

/// Model probabilities are clamped to this floor inside the KL logarithm.
pub const KL_PROB_FLOOR: f64 = 1e-12;

pub fn softmax_f64(logits: &[f64; 3]) -> [f64; 3] {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = logits.map(|l| (l - max).exp());
    let z: f64 = e.iter().sum();
    e.map(|x| x / z)
}

/// KL(target || model) = sum_i t_i (ln t_i - ln q_i), with 0 ln 0 = 0.
///
/// Its gradient in the logits, `q - t`, is the soft-target cross-entropy
/// gradient; the two losses differ only by the target entropy.
pub fn loss_kl(output: &ClassifierOutput, target: &LabelDistribution) -> f64 {
    let mut loss = 0.0;
    for (t, q) in target.p.iter().zip(output.probs) {
        if *t > 0.0 {
            if q < KL_PROB_FLOOR {
                log::debug!("model probability {q:e} clamped to {KL_PROB_FLOOR:e} in KL");
            }
            loss += t * (t.ln() - q.max(KL_PROB_FLOOR).ln());
        }
    }
    loss
}

/// Mean cross-entropy of `logits` (`[positions, vocab]`) against the true
/// ids. Zero positions give zero.
pub fn loss_mlm(logits: ArrayView2<'_, f64>, true_ids: &[u32]) -> f64 {
    assert_eq!(logits.nrows(), true_ids.len(), "one true id per masked position");
    if true_ids.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (row, &t) in logits.rows().into_iter().zip(true_ids) {
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        total += z.ln() - (row[t as usize] - max);
    }
    total / true_ids.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn out(probs: [f64; 3]) -> ClassifierOutput {
        ClassifierOutput {
            logits: probs.map(f64::ln),
            probs,
        }
    }

    #[test]
    fn kl_identity() {
        let t = LabelDistribution::from_probs([0.2, 0.3, 0.5]).unwrap();
        assert!(loss_kl(&out([0.2, 0.3, 0.5]), &t).abs() < 1e-9);
    }

    #[test]
    fn kl_closed_forms() {
        let t = LabelDistribution::from_probs([1.0, 0.0, 0.0]).unwrap();
        let third = 1.0 / 3.0;
        assert!((loss_kl(&out([third; 3]), &t) - 3f64.ln()).abs() < 1e-12);

        // 0.4 ln(0.4/0.25) + 0.2 ln(0.2/0.5) + 0.4 ln(0.4/0.25), evaluated
        // independently: 0.8 * 0.470003629 - 0.2 * 0.916290732
        let t = LabelDistribution::from_probs([0.4, 0.2, 0.4]).unwrap();
        let got = loss_kl(&out([0.25, 0.5, 0.25]), &t);
        assert!((got - 0.192_744_757_021_757).abs() < 1e-9, "{got}");
    }

    #[test]
    fn kl_clamps_zero_probability() {
        let t = LabelDistribution::from_probs([0.5, 0.5, 0.0]).unwrap();
        let l = loss_kl(&out([1.0, 0.0, 0.0]), &t);
        assert!(l.is_finite());
        assert!((l - 0.5 * (0.5f64.ln() - 1e-12f64.ln()) - 0.5 * 0.5f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn mlm_closed_forms() {
        let confident = array![[0.0, 60.0, 0.0], [80.0, 0.0, 0.0]];
        assert!(loss_mlm(confident.view(), &[1, 0]) < 1e-6);
        let uniform = Array2::<f64>::zeros((4, 50));
        assert!((loss_mlm(uniform.view(), &[0, 7, 9, 49]) - 50f64.ln()).abs() < 1e-12);
        assert_eq!(loss_mlm(Array2::<f64>::zeros((0, 5)).view(), &[]), 0.0);
    }

    #[test]
    fn mlm_matches_hand_computation() {
        // row 0: -ln(e^1 / (e^1 + e^2 + e^0)); row 1: -ln(e^0 / (e^-1 + e^0 + e^3))
        let logits = array![[1.0, 2.0, 0.0], [-1.0, 0.0, 3.0]];
        let r0 = (1f64.exp() + 2f64.exp() + 1.0).ln() - 1.0;
        let r1 = ((-1f64).exp() + 1.0 + 3f64.exp()).ln();
        assert!((loss_mlm(logits.view(), &[0, 1]) - (r0 + r1) / 2.0).abs() < 1e-12);
    }
}
