//! One-predictor-at-a-time screening with Benjamini–Hochberg control.

use ndarray::{concatenate, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::fit_glm;
use crate::model::Dataset;
use crate::scalar::Scalar;

/// Default false discovery rate for the screen.
pub const BH_LEVEL: f64 = 0.05;

/// Marginal fit of z_k with the locked-in columns.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalTest {
    pub coef: f64,
    pub p_value: f64,
}

/// Fits each z_k alone next to X. Columns whose fit fails (e.g. a constant
/// column collinear with the intercept) get p = 1.
pub fn marginal_tests<T: Scalar>(data: &Dataset<T>) -> Vec<MarginalTest> {
    let j = data.j();
    let mut names = data.x_names.clone();
    names.push(String::new());
    (0..data.k())
        .into_par_iter()
        .map(|k| {
            let zk = data.z.column(k).insert_axis(Axis(1));
            let design = concatenate(Axis(1), &[data.x.view(), zk]).expect("matching rows");
            marginal_fit(&design, data, &names, j)
        })
        .collect()
}

fn marginal_fit<T: Scalar>(
    design: &ndarray::Array2<T>,
    data: &Dataset<T>,
    names: &[String],
    j: usize,
) -> MarginalTest {
    match fit_glm(design.view(), data.y_slice(), data.offset.view(), &data.spec, names) {
        Ok(fit) => {
            let p = fit.p_value(j, data.spec.family);
            MarginalTest {
                coef: fit.coef[j].as_f64(),
                p_value: if p.is_nan() { 1.0 } else { p },
            }
        }
        Err(_) => MarginalTest {
            coef: 0.0,
            p_value: 1.0,
        },
    }
}

/// Benjamini–Hochberg step-up: rejects the hypotheses with the i smallest
/// p-values, where i is the largest rank with p_(i) ≤ i·level/m.
pub fn benjamini_hochberg(p_values: &[f64], level: f64) -> Result<Vec<bool>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::validation("sim_harness", format!("FDR level {level} not in (0, 1)")));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let cutoff = order
        .iter()
        .enumerate()
        .filter(|&(rank, &i)| p_values[i] <= (rank + 1) as f64 * level / m as f64)
        .map(|(rank, _)| rank + 1)
        .max()
        .unwrap_or(0);
    let mut reject = vec![false; m];
    for &i in &order[..cutoff] {
        reject[i] = true;
    }
    Ok(reject)
}

/// BH discoveries among the marginal tests, as (index, sign of the fitted coefficient).
pub fn bh_discoveries<T: Scalar>(data: &Dataset<T>, level: f64) -> Result<Vec<(usize, i8)>> {
    let tests = marginal_tests(data);
    let p: Vec<f64> = tests.iter().map(|t| t.p_value).collect();
    let reject = benjamini_hochberg(&p, level)?;
    Ok(reject
        .iter()
        .enumerate()
        .filter(|(_, &r)| r)
        .map(|(k, _)| (k, if tests[k].coef < 0.0 { -1 } else { 1 }))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bh_matches_hand_computation() {
        // Sorted p: .001 .008 .039 .041 .042 .06 .074 .205; m = 8, level .05.
        // Thresholds i·.05/8: .00625 .0125 .01875 .025 .03125 .0375 .04375 .05.
        let p = [0.042, 0.001, 0.205, 0.008, 0.074, 0.039, 0.041, 0.06];
        let r = benjamini_hochberg(&p, 0.05).unwrap();
        assert_eq!(r, vec![false, true, false, true, false, false, false, false]);
    }

    #[test]
    fn bh_step_up_rescues_earlier_ranks() {
        // p_(2) = .03 fails its own threshold .025 but p_(3) = .035 ≤ .0375 passes.
        let p = [0.01, 0.03, 0.035, 0.9];
        let r = benjamini_hochberg(&p, 0.05).unwrap();
        assert_eq!(r, vec![true, true, true, false]);
    }

    #[test]
    fn bh_rejects_bad_level() {
        assert!(benjamini_hochberg(&[0.1], 0.0).is_err());
        assert!(benjamini_hochberg(&[0.1], 1.0).is_err());
    }
}
