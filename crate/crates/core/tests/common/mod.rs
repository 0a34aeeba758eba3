#![allow(dead_code)]

use hcae::nn::Grads;
use hcae::params::ParamGroup;

pub const FD_STEP: f64 = 1e-6;

/// Relative error between two gradient vectors; both-tiny vectors compare absolutely.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-9 {
        diff
    } else {
        diff / scale
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Central differences of `loss` for every trainable, non-statistic group.
/// Returns `(group id, relative error, analytic norm)` per group.
pub fn finite_difference_report<T>(
    target: &mut T,
    groups: fn(&mut T) -> &mut Vec<ParamGroup>,
    loss: impl Fn(&T) -> f64,
    analytic: &Grads,
) -> Vec<(String, f64, f64)> {
    let count = groups(target).len();
    let mut report = Vec::new();
    for gi in 0..count {
        let (trainable, statistic, len, id) = {
            let g = &groups(target)[gi];
            (g.trainable, g.kind.is_statistic(), g.data.len(), g.id.clone())
        };
        if !trainable || statistic {
            assert!(analytic.groups[gi].is_none(), "gradient reported for frozen group {id}");
            continue;
        }
        let a = analytic.groups[gi].clone().unwrap_or_else(|| panic!("missing gradient for {id}"));
        let mut numeric = vec![0.0; len];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = groups(target)[gi].data[k];
            groups(target)[gi].data[k] = orig + FD_STEP;
            let up = loss(target);
            groups(target)[gi].data[k] = orig - FD_STEP;
            let down = loss(target);
            groups(target)[gi].data[k] = orig;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        report.push((id, relative_error(&a, &numeric), norm(&a)));
    }
    report
}
