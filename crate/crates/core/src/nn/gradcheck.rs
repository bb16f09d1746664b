//! Central finite-difference gradient checking.

use crate::rng::SeededRng;

use super::Params;

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// `|a - n| / max(|a|, |n|, 1e-7)`; the floor keeps exact zeros comparable.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

/// Compares `analytic` (same structure as `net`) against central differences
/// of `loss` at `probes` parameter positions drawn uniformly over all scalars.
pub fn check_gradients<N, F>(
    net: &mut N,
    analytic: &N,
    loss: F,
    probes: usize,
    step: f64,
    rng: &mut SeededRng,
) -> GradCheckReport
where
    N: Params<f64>,
    F: Fn(&N) -> f64,
{
    let names: Vec<String> = net.named_tensors().into_iter().map(|(n, _)| n).collect();
    let sizes: Vec<usize> = net.tensors().iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let grads: Vec<Vec<f64>> = analytic.tensors().iter().map(|t| t.data().to_vec()).collect();
    let mut report = GradCheckReport::default();
    if total == 0 {
        return report;
    }
    for _ in 0..probes {
        let mut flat = rng.below(total as u64) as usize;
        let mut ti = 0;
        while flat >= sizes[ti] {
            flat -= sizes[ti];
            ti += 1;
        }
        let original = net.tensors()[ti].data()[flat];
        net.tensors_mut()[ti].data_mut()[flat] = original + step;
        let up = loss(net);
        net.tensors_mut()[ti].data_mut()[flat] = original - step;
        let down = loss(net);
        net.tensors_mut()[ti].data_mut()[flat] = original;
        let numeric = (up - down) / (2.0 * step);
        let analytic = grads[ti][flat];
        report.probes.push(Probe {
            tensor: names[ti].clone(),
            index: flat,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    report
}
