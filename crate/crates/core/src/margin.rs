//! Learned margins.
//!
//! The ordinal network maps every class row of the statistics snapshot to a
//! Gaussian `(mu_j, sigma_j)` over class indices, anchored at `j`; sampling
//! that Gaussian at each class gives the `c x c` ordinal table. The
//! variational network maps each row of a statistics residual to one signed,
//! clamped margin per class. Both networks share weights across rows and see
//! the statistics as constants.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{sigmoid, softplus, DenseNet, NetGrads, Trace};
use crate::stats::StatsSnapshot;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    /// Cap on every margin, in logit units.
    pub m_max: f64,
    /// Largest offset of `mu_j` from class index `j`.
    pub mu_range: f64,
    /// Floor added to the softplus spread.
    pub sigma_min: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        MarginConfig {
            m_max: 0.5,
            mu_range: 2.0,
            sigma_min: 0.5,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.m_max) || !positive(self.sigma_min) {
            return Err(Error::Config("m_max and sigma_min must be positive".into()));
        }
        if !(self.mu_range.is_finite() && self.mu_range >= 0.0) {
            return Err(Error::Config("mu_range must be non-negative".into()));
        }
        Ok(())
    }
}

/// Weights of the ordinal and variational terms in the combined margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginMix {
    pub lambda: f64,
    pub beta: f64,
}

impl MarginMix {
    pub const NONE: MarginMix = MarginMix {
        lambda: 0.0,
        beta: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0 && self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "lambda and beta must be finite and non-negative, got ({}, {})",
                self.lambda, self.beta
            )));
        }
        Ok(())
    }
}

/// `m_max * exp(-(k - mu)^2 / (2 sigma^2))` for `k = 0..classes`.
pub fn discretize(mu: f64, sigma: f64, m_max: f64, classes: usize) -> Vec<f64> {
    (0..classes)
        .map(|k| {
            let d = k as f64 - mu;
            m_max * (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct OrdinalMargins {
    mu: Vec<f64>,
    sigma: Vec<f64>,
    table: Matrix,
    raw: Vec<[f64; 2]>,
    traces: Vec<Trace>,
    config: MarginConfig,
}

impl OrdinalMargins {
    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// Row `j` is the ordinal margin profile used for samples of class `j`.
    pub fn table(&self) -> &Matrix {
        &self.table
    }

    pub fn classes(&self) -> usize {
        self.mu.len()
    }

    /// Backpropagates `dL/dtable` into the ordinal network's gradients.
    pub fn backward(&self, net: &DenseNet, d_table: &Matrix, grads: &mut NetGrads) -> Result<()> {
        let c = self.classes();
        if d_table.shape() != (c, c) {
            return Err(Error::Shape {
                context: "ordinal table gradient",
                expected: c * c,
                actual: d_table.rows() * d_table.cols(),
            });
        }
        for j in 0..c {
            let (mu, sigma) = (self.mu[j], self.sigma[j]);
            let s2 = sigma * sigma;
            let mut d_mu = 0.0;
            let mut d_sigma = 0.0;
            for (k, (&g, &m)) in d_table.row(j).iter().zip(self.table.row(j)).enumerate() {
                if g == 0.0 {
                    continue;
                }
                let d = k as f64 - mu;
                d_mu += g * m * d / s2;
                d_sigma += g * m * d * d / (s2 * sigma);
            }
            if d_mu == 0.0 && d_sigma == 0.0 {
                continue;
            }
            let [o0, o1] = self.raw[j];
            let th = o0.tanh();
            let upstream = [
                d_mu * self.config.mu_range * (1.0 - th * th),
                d_sigma * sigmoid(o1),
            ];
            net.backward(&self.traces[j], &upstream, grads)?;
        }
        Ok(())
    }
}

fn check_margin_net(net: &DenseNet, width: usize, outputs: usize, which: &'static str) -> Result<()> {
    if net.input_width() != width {
        return Err(Error::Shape {
            context: which,
            expected: width,
            actual: net.input_width(),
        });
    }
    if net.output_width() != outputs {
        return Err(Error::Shape {
            context: which,
            expected: outputs,
            actual: net.output_width(),
        });
    }
    Ok(())
}

fn dump_rows(values: &Matrix) -> String {
    values
        .iter_rows()
        .enumerate()
        .map(|(j, row)| {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6e}")).collect();
            format!("  row {j}: [{}]", cells.join(", "))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Runs the ordinal network over every snapshot row and discretizes.
pub fn ordinal_forward(net: &DenseNet, snapshot: &StatsSnapshot, config: &MarginConfig) -> Result<OrdinalMargins> {
    let c = snapshot.classes();
    check_margin_net(net, snapshot.width(), 2, "ordinal margin network")?;
    let mut mu = Vec::with_capacity(c);
    let mut sigma = Vec::with_capacity(c);
    let mut raw = Vec::with_capacity(c);
    let mut traces = Vec::with_capacity(c);
    let mut table = Matrix::zeros(c, c);
    for j in 0..c {
        let (out, trace) = net.forward_traced(snapshot.row(j))?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "ordinal margin network produced {out:?} for class {j}; statistics snapshot:\n{}",
                dump_rows(snapshot.values())
            )));
        }
        let m = j as f64 + out[0].tanh() * config.mu_range;
        let s = softplus(out[1]) + config.sigma_min;
        table.row_mut(j).copy_from_slice(&discretize(m, s, config.m_max, c));
        mu.push(m);
        sigma.push(s);
        raw.push([out[0], out[1]]);
        traces.push(trace);
    }
    Ok(OrdinalMargins {
        mu,
        sigma,
        table,
        raw,
        traces,
        config: *config,
    })
}

#[derive(Debug, Clone)]
pub struct VariationalMargin {
    values: Vec<f64>,
    unclamped: Vec<f64>,
    traces: Vec<Trace>,
    m_max: f64,
}

impl VariationalMargin {
    /// Zero margin for `classes` classes, with no network behind it.
    pub fn zeros(classes: usize, m_max: f64) -> Self {
        VariationalMargin {
            values: vec![0.0; classes],
            unclamped: vec![0.0; classes],
            traces: Vec::new(),
            m_max,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Backpropagates `dL/dvalues`; clamped entries pass no gradient.
    pub fn backward(&self, net: &DenseNet, d_values: &[f64], grads: &mut NetGrads) -> Result<()> {
        if d_values.len() != self.values.len() {
            return Err(Error::Shape {
                context: "variational margin gradient",
                expected: self.values.len(),
                actual: d_values.len(),
            });
        }
        if self.traces.is_empty() {
            return Ok(());
        }
        for (j, &g) in d_values.iter().enumerate() {
            if g == 0.0 || self.unclamped[j].abs() > self.m_max {
                continue;
            }
            net.backward(&self.traces[j], &[g], grads)?;
        }
        Ok(())
    }
}

/// Runs the variational network over every residual row and clamps to
/// `[-m_max, m_max]`.
pub fn variational_forward(net: &DenseNet, delta: &Matrix, config: &MarginConfig) -> Result<VariationalMargin> {
    check_margin_net(net, delta.cols(), 1, "variational margin network")?;
    let mut values = Vec::with_capacity(delta.rows());
    let mut unclamped = Vec::with_capacity(delta.rows());
    let mut traces = Vec::with_capacity(delta.rows());
    for (j, row) in delta.iter_rows().enumerate() {
        let (out, trace) = net.forward_traced(row)?;
        if !out[0].is_finite() {
            return Err(Error::NonFinite(format!(
                "variational margin network produced {} for class {j}; residual:\n{}",
                out[0],
                dump_rows(delta)
            )));
        }
        unclamped.push(out[0]);
        values.push(out[0].clamp(-config.m_max, config.m_max));
        traces.push(trace);
    }
    Ok(VariationalMargin {
        values,
        unclamped,
        traces,
        m_max: config.m_max,
    })
}

/// Margin vector for a sample of class `class`:
/// `lambda * table[class][k] + beta * variational[k]`.
pub fn combine(ordinal: &OrdinalMargins, variational: &VariationalMargin, mix: MarginMix, class: usize) -> Vec<f64> {
    ordinal
        .table
        .row(class)
        .iter()
        .zip(&variational.values)
        .map(|(o, v)| mix.lambda * o + mix.beta * v)
        .collect()
}

/// One row per class: `class,mu,sigma,mv,mp_0..` where `mp_*` is the
/// combined margin a sample of that class would receive.
pub fn write_margin_csv<W: Write>(
    out: &mut W,
    ordinal: &OrdinalMargins,
    variational: &VariationalMargin,
    mix: MarginMix,
) -> std::io::Result<()> {
    let c = ordinal.classes();
    let mut header = vec!["class".to_string(), "mu".into(), "sigma".into(), "mv".into()];
    header.extend((0..c).map(|k| format!("mp_{k}")));
    writeln!(out, "{}", header.join(","))?;
    for j in 0..c {
        let mut fields = vec![
            j.to_string(),
            ordinal.mu[j].to_string(),
            ordinal.sigma[j].to_string(),
            variational.values[j].to_string(),
        ];
        fields.extend(combine(ordinal, variational, mix, j).iter().map(f64::to_string));
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Dense};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_net(width: usize, outputs: usize) -> DenseNet {
        DenseNet::zeros(&[width, 4, outputs], &[Activation::Tanh, Activation::Identity]).unwrap()
    }

    fn snapshot(c: usize, d: usize) -> StatsSnapshot {
        let values: Vec<f64> = (0..c * (d + 1 + c)).map(|i| (i as f64 * 0.37).sin()).collect();
        StatsSnapshot::from_matrix(Matrix::from_vec(c, d + 1 + c, values).unwrap(), d, Default::default()).unwrap()
    }

    #[test]
    fn zero_ordinal_net_anchors_each_row_on_its_class() {
        let cfg = MarginConfig::default();
        let (c, d) = (7, 3);
        let snap = snapshot(c, d);
        let om = ordinal_forward(&zero_net(snap.width(), 2), &snap, &cfg).unwrap();
        let sigma0 = softplus(0.0) + cfg.sigma_min;
        for j in 0..c {
            assert_eq!(om.mu()[j], j as f64);
            assert_eq!(om.sigma()[j], sigma0);
            let row = om.table().row(j);
            assert_eq!(row[j], cfg.m_max);
            for k in 0..c {
                assert!(row[k] <= row[j]);
                assert!(row[k] >= 0.0);
            }
            for off in 1..c {
                if j >= off && j + off < c {
                    assert_eq!(row[j - off], row[j + off]);
                }
            }
        }
    }

    #[test]
    fn variational_zero_residual_zero_bias_gives_zero() {
        let cfg = MarginConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = DenseNet::new(&[9, 5, 1], &[Activation::Tanh, Activation::Identity], &mut rng).unwrap();
        let vm = variational_forward(&net, &Matrix::zeros(4, 9), &cfg).unwrap();
        assert_eq!(vm.values(), &[0.0; 4]);
    }

    #[test]
    fn variational_bias_only_output_is_clamped() {
        let cfg = MarginConfig::default();
        for (bias, expect) in [(0.2, 0.2), (3.0, 0.5), (-7.0, -0.5)] {
            let hidden = Dense::zeros(9, 3, Activation::Tanh);
            let out = Dense::from_parts(3, 1, vec![0.0; 3], vec![bias], Activation::Identity).unwrap();
            let net = DenseNet::from_layers(vec![hidden, out]).unwrap();
            let delta = Matrix::from_vec(2, 9, (0..18).map(|i| i as f64).collect()).unwrap();
            let vm = variational_forward(&net, &delta, &cfg).unwrap();
            assert_eq!(vm.values(), &[expect, expect]);
        }
    }

    #[test]
    fn combine_reductions() {
        let cfg = MarginConfig::default();
        let snap = snapshot(5, 2);
        let om = ordinal_forward(&zero_net(snap.width(), 2), &snap, &cfg).unwrap();
        let hidden = Dense::zeros(snap.width(), 2, Activation::Tanh);
        let out = Dense::from_parts(2, 1, vec![0.0; 2], vec![-0.3], Activation::Identity).unwrap();
        let fv = DenseNet::from_layers(vec![hidden, out]).unwrap();
        let vm = variational_forward(&fv, &Matrix::zeros(5, snap.width()), &cfg).unwrap();

        assert_eq!(combine(&om, &vm, MarginMix::NONE, 2), vec![0.0; 5]);
        let only_v = MarginMix { lambda: 0.0, beta: 2.0 };
        for j in 0..5 {
            assert_eq!(combine(&om, &vm, only_v, j), vec![-0.6; 5]);
        }
        let only_o = MarginMix { lambda: 1.5, beta: 0.0 };
        let sigma0 = softplus(0.0) + cfg.sigma_min;
        let mp = combine(&om, &vm, only_o, 3);
        for (k, v) in mp.iter().enumerate() {
            let d = k as f64 - 3.0;
            let expect = 1.5 * cfg.m_max * (-(d * d) / (2.0 * sigma0 * sigma0)).exp();
            assert!((v - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn wrong_network_width_is_rejected() {
        let cfg = MarginConfig::default();
        let snap = snapshot(4, 2);
        assert!(ordinal_forward(&zero_net(snap.width() + 1, 2), &snap, &cfg).is_err());
        assert!(ordinal_forward(&zero_net(snap.width(), 3), &snap, &cfg).is_err());
        assert!(variational_forward(&zero_net(5, 1), &Matrix::zeros(4, 6), &cfg).is_err());
    }

    #[test]
    fn non_finite_output_dumps_statistics() {
        let cfg = MarginConfig::default();
        let snap = snapshot(3, 2);
        let out = Dense::from_parts(snap.width(), 2, vec![0.0; 2 * snap.width()], vec![f64::NAN, 0.0], Activation::Identity)
            .unwrap();
        let net = DenseNet::from_layers(vec![out]).unwrap();
        let err = ordinal_forward(&net, &snap, &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert!(err.to_string().contains("row 2"));
    }

}
