//! Central finite-difference verification of tape gradients.

use crate::nn::params::ParamSet;
use crate::nn::tape::{NodeRef, Tape};
use crate::nn::tensor::NnError;
use rand::Rng;

/// Forward and backward difference quotients that disagree by more than this
/// (absolutely and relatively) mark a non-differentiable point, e.g. a relu
/// kink; such coordinates are skipped rather than failed.
const KINK_ABS: f64 = 1e-6;
const KINK_REL: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_nondifferentiable: usize,
}

/// Compares every analytic gradient coordinate against a central difference
/// of the loss. `f` must rebuild the same loss from scratch on every call —
/// any randomness inside it has to be freshly seeded so repeated evaluations
/// agree.
pub fn grad_check<F>(params: &mut ParamSet, step: f64, f: F) -> Result<GradCheckReport, NnError>
where
    F: Fn(&ParamSet, &mut Tape) -> Result<NodeRef, NnError>,
{
    let coords = all_coords(params);
    check_coords(params, step, &coords, &f)
}

/// Like [`grad_check`] but only probes `samples` coordinates drawn without
/// replacement, for losses too expensive to probe exhaustively.
pub fn grad_check_sampled<F, R: Rng>(
    params: &mut ParamSet,
    step: f64,
    samples: usize,
    rng: &mut R,
    f: F,
) -> Result<GradCheckReport, NnError>
where
    F: Fn(&ParamSet, &mut Tape) -> Result<NodeRef, NnError>,
{
    let mut coords = all_coords(params);
    let take = samples.min(coords.len());
    for i in 0..take {
        let j = rng.random_range(i..coords.len());
        coords.swap(i, j);
    }
    coords.truncate(take);
    check_coords(params, step, &coords, &f)
}

fn all_coords(params: &ParamSet) -> Vec<(String, usize)> {
    let names: Vec<String> = params.names().map(str::to_string).collect();
    names
        .iter()
        .flat_map(|name| {
            let len = params.get(name).expect("listed name").len();
            (0..len).map(move |i| (name.clone(), i))
        })
        .collect()
}

fn evaluate<F>(params: &ParamSet, f: &F) -> Result<f64, NnError>
where
    F: Fn(&ParamSet, &mut Tape) -> Result<NodeRef, NnError>,
{
    let mut tape = Tape::new();
    let node = f(params, &mut tape)?;
    let out = tape.value(node);
    if !out.is_scalar() {
        return Err(NnError::NotScalar {
            op: "grad_check",
            shape: out.shape().to_vec(),
        });
    }
    let value = out.scalar_value();
    if !value.is_finite() {
        return Err(NnError::NonFinite("grad check loss".into()));
    }
    Ok(value)
}

fn check_coords<F>(
    params: &mut ParamSet,
    step: f64,
    coords: &[(String, usize)],
    f: &F,
) -> Result<GradCheckReport, NnError>
where
    F: Fn(&ParamSet, &mut Tape) -> Result<NodeRef, NnError>,
{
    if !(step.is_finite() && step > 0.0) {
        return Err(NnError::NonFinite(format!("grad check step {step}")));
    }
    let mut tape = Tape::new();
    let node = f(params, &mut tape)?;
    if !tape.value(node).is_scalar() {
        return Err(NnError::NotScalar {
            op: "grad_check",
            shape: tape.value(node).shape().to_vec(),
        });
    }
    let base = tape.value(node).scalar_value();
    if !base.is_finite() {
        return Err(NnError::NonFinite("grad check loss".into()));
    }
    let analytic = tape.backward(node)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_nondifferentiable: 0,
    };
    for (name, i) in coords {
        let slot = params
            .value_mut(name)
            .ok_or_else(|| NnError::UnknownParam(name.clone()))?;
        let original = slot.data()[*i];

        params.value_mut(name).expect("present").data_mut()[*i] = original + step;
        let plus = evaluate(params, f);
        params.value_mut(name).expect("present").data_mut()[*i] = original - step;
        let minus = evaluate(params, f);
        params.value_mut(name).expect("present").data_mut()[*i] = original;
        let (plus, minus) = (plus?, minus?);

        let forward = (plus - base) / step;
        let backward = (base - minus) / step;
        let disagreement = (forward - backward).abs();
        if disagreement > KINK_ABS && disagreement > KINK_REL * forward.abs().max(backward.abs()) {
            report.skipped_nondifferentiable += 1;
            continue;
        }

        let numeric = (plus - minus) / (2.0 * step);
        let grad = analytic.param(name).map(|t| t.data()[*i]).unwrap_or(0.0);
        let rel = (grad - numeric).abs() / numeric.abs().max(1.0);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::{dense, lstm_cell};
    use crate::nn::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const STEP: f64 = 1e-3;
    const TOL: f64 = 1e-4;

    fn seeded_params(spec: &[(&str, &[usize])], seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape) in spec {
            let fan_in = shape[0];
            params.init_uniform(name, shape, fan_in, &mut rng).unwrap();
        }
        params
    }

    #[test]
    fn dense_sigmoid_chain_passes_finite_differences() {
        let mut params = seeded_params(&[("w", &[3, 4]), ("b", &[4]), ("x", &[2, 3])], 1);
        let report = grad_check(&mut params, STEP, |p, tape| {
            let x = tape.param(p, "x")?;
            let w = tape.param(p, "w")?;
            let b = tape.param(p, "b")?;
            let z = dense(tape, x, w, b)?;
            let s = tape.sigmoid(z);
            let t = tape.tanh(s);
            Ok(tape.sum(t))
        })
        .unwrap();
        assert!(report.max_rel_error < TOL, "{report:?}");
        assert_eq!(report.checked, 3 * 4 + 4 + 2 * 3);
    }

    #[test]
    fn softmax_and_fused_losses_pass_finite_differences() {
        let mut params = seeded_params(&[("z", &[4, 5])], 2);
        let targets = [1u32, 4, 0, 2];
        let weights = [0.25, 0.5, 1.0, -0.75];

        let report = grad_check(&mut params, STEP, |p, tape| {
            let z = tape.param(p, "z")?;
            let probs = tape.softmax_rows(z)?;
            tape.categorical_cross_entropy(probs, &targets, &weights)
        })
        .unwrap();
        assert!(report.max_rel_error < TOL, "two-op: {report:?}");

        let report = grad_check(&mut params, STEP, |p, tape| {
            let z = tape.param(p, "z")?;
            tape.softmax_cross_entropy(z, &targets, &weights)
        })
        .unwrap();
        assert!(report.max_rel_error < TOL, "fused: {report:?}");
    }

    #[test]
    fn bernoulli_losses_pass_finite_differences() {
        let mut params = seeded_params(&[("x", &[6, 1])], 3);
        let labels = [1.0, 0.0, 1.0, 1.0, 0.0, 0.5];

        let report = grad_check(&mut params, STEP, |p, tape| {
            let x = tape.param(p, "x")?;
            let probs = tape.sigmoid(x);
            tape.binary_cross_entropy(probs, &labels)
        })
        .unwrap();
        assert!(report.max_rel_error < TOL, "two-op: {report:?}");

        let report = grad_check(&mut params, STEP, |p, tape| {
            let x = tape.param(p, "x")?;
            tape.sigmoid_binary_cross_entropy(x, &labels)
        })
        .unwrap();
        assert!(report.max_rel_error < TOL, "fused: {report:?}");
    }

    #[test]
    fn convolution_pooling_and_dropout_pass_finite_differences() {
        let mut params = seeded_params(
            &[
                ("x", &[9, 2]),
                ("k", &[6, 3]),
                ("kb", &[3]),
                ("w", &[3, 2]),
                ("wb", &[2]),
            ],
            4,
        );
        let report = grad_check(&mut params, STEP, |p, tape| {
            let x = tape.param(p, "x")?;
            let k = tape.param(p, "k")?;
            let kb = tape.param(p, "kb")?;
            let conv = tape.conv1d(x, k, kb, 3)?;
            let act = tape.relu(conv);
            let pooled = tape.global_max_pool1d(act)?;
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let dropped = tape.dropout(pooled, 0.25, true, &mut rng)?;
            let w = tape.param(p, "w")?;
            let wb = tape.param(p, "wb")?;
            let out = dense(tape, dropped, w, wb)?;
            Ok(tape.sum(out))
        })
        .unwrap();
        assert!(report.max_rel_error < TOL, "{report:?}");
        assert!(report.checked > 0);
    }

    #[test]
    fn embedding_and_lstm_cell_pass_finite_differences() {
        let mut params = seeded_params(
            &[
                ("emb", &[5, 3]),
                ("wx", &[3, 16]),
                ("wh", &[4, 16]),
                ("b", &[16]),
                ("h0", &[2, 4]),
                ("c0", &[2, 4]),
            ],
            5,
        );
        let report = grad_check(&mut params, STEP, |p, tape| {
            let table = tape.param(p, "emb")?;
            let x = tape.embedding(table, &[3, 1])?;
            let h0 = tape.param(p, "h0")?;
            let c0 = tape.param(p, "c0")?;
            let wx = tape.param(p, "wx")?;
            let wh = tape.param(p, "wh")?;
            let b = tape.param(p, "b")?;
            let (h1, c1) = lstm_cell(tape, x, h0, c0, wx, wh, b)?;
            let x2 = tape.embedding(table, &[0, 4])?;
            let (h2, _c2) = lstm_cell(tape, x2, h1, c1, wx, wh, b)?;
            Ok(tape.sum(h2))
        })
        .unwrap();
        assert!(report.max_rel_error < TOL, "{report:?}");
    }

    #[test]
    fn linear_losses_agree_with_differences_almost_exactly() {
        let mut params = seeded_params(&[("w", &[4, 4])], 6);
        let report = grad_check(&mut params, STEP, |p, tape| {
            let w = tape.param(p, "w")?;
            let scaled = tape.scale(w, 3.5);
            Ok(tape.sum(scaled))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-10, "{report:?}");
        assert_eq!(report.skipped_nondifferentiable, 0);
    }

    #[test]
    fn relu_kinks_are_detected_and_skipped() {
        let mut params = ParamSet::new();
        params
            .insert("w", Tensor::new(&[3], vec![-0.7, 0.0, 0.9]).unwrap())
            .unwrap();
        let report = grad_check(&mut params, STEP, |p, tape| {
            let w = tape.param(p, "w")?;
            let r = tape.relu(w);
            Ok(tape.sum(r))
        })
        .unwrap();
        assert_eq!(report.skipped_nondifferentiable, 1);
        assert_eq!(report.checked, 2);
        assert!(report.max_rel_error < TOL);
    }

    #[test]
    fn sampling_limits_the_probe_count_deterministically() {
        let mut params = seeded_params(&[("w", &[10, 10])], 7);
        let run = |params: &mut ParamSet| {
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            grad_check_sampled(params, STEP, 5, &mut rng, |p, tape| {
                let w = tape.param(p, "w")?;
                let s = tape.sigmoid(w);
                Ok(tape.sum(s))
            })
            .unwrap()
        };
        let a = run(&mut params);
        let b = run(&mut params);
        assert_eq!(a.checked, 5);
        assert_eq!(a, b);
        assert!(a.max_rel_error < TOL);
    }
}
