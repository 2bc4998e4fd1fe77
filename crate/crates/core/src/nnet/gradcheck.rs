//! Central-difference gradient checking.

/// Step used by [`gradient_check`].
pub const FD_STEP: f64 = 1e-5;

/// A scalar function of a flat parameter vector with an analytic gradient.
pub trait GradProbe {
    fn num_params(&self) -> usize;
    fn param(&self, i: usize) -> f64;
    fn set_param(&mut self, i: usize, value: f64);
    /// Frozen parameters are reported but not checked.
    fn is_trainable(&self, _i: usize) -> bool {
        true
    }
    /// Loss at the current parameters, and a signature of the branch of
    /// every piecewise-linear choice (e.g. max-pooling argmaxes) taken.
    fn evaluate(&mut self) -> (f64, u64);
    /// Analytic gradient of the loss for every parameter.
    fn analytic_gradient(&mut self) -> Vec<f64>;
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// `max |analytic - numeric| / max |analytic|` over checked parameters.
    pub max_scaled_error: f64,
    /// Index of the parameter with the largest error.
    pub worst: Option<usize>,
    pub checked: usize,
    /// Parameters whose ±h probes crossed a max-pooling tie.
    pub skipped_ties: usize,
    pub frozen: usize,
}

impl GradReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central differences with step `h` against the analytic gradient.
/// Parameters whose perturbed evaluations change branch are skipped.
pub fn gradient_check(probe: &mut impl GradProbe, h: f64) -> GradReport {
    let analytic = probe.analytic_gradient();
    let (_, base_sig) = probe.evaluate();
    let mut report = GradReport::default();
    let mut max_abs_diff: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for i in 0..probe.num_params() {
        if !probe.is_trainable(i) {
            report.frozen += 1;
            continue;
        }
        let x = probe.param(i);
        probe.set_param(i, x + h);
        let (plus, sig_plus) = probe.evaluate();
        probe.set_param(i, x - h);
        let (minus, sig_minus) = probe.evaluate();
        probe.set_param(i, x);
        if sig_plus != base_sig || sig_minus != base_sig {
            report.skipped_ties += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        max_abs_diff = max_abs_diff.max((analytic[i] - numeric).abs());
        scale = scale.max(analytic[i].abs());
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some(i);
        }
    }
    report.max_scaled_error = if scale > 0.0 { max_abs_diff / scale } else { max_abs_diff };
    report
}

/// Order-sensitive hash of argmax choices, for [`GradProbe::evaluate`].
pub fn branch_signature(choices: impl IntoIterator<Item = usize>) -> u64 {
    choices
        .into_iter()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, c| (h ^ c as u64).wrapping_mul(0x0000_0100_0000_01b3))
}
