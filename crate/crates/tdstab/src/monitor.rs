//! Measurement-driven monitoring: windows of frames to stability reports,
//! and loading sweeps that run the whole pipeline at each λ.

use std::io::Write;

use thiserror::Error;

use crate::estimator::{
    estimate_substation, estimate_window, EstimatorConfig, EstimatorError, SubstationEquivalent,
    TheveninEquivalent,
};
use crate::indices::{build_report, IndexError, StabilityReport, BOUNDARY_BAND};
use crate::measurement::{
    add_noise, excitation_points, frames_from_solution, group_by_substation, sample_points_from,
    sliding_windows, MeasurementError, MeasurementFrame, MeasurementWindow, FRAME_INTERVAL,
};
use crate::network::NetworkModel;
use crate::powerflow::{find_lambda_max_with, NoseOptions, PowerFlowError, SolveResult};

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error(transparent)]
    Measurement(#[from] MeasurementError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error("no frames to monitor")]
    NoFrames,
}

/// Estimation output for one set of windows ending at the same instant.
#[derive(Clone, Debug)]
pub struct Assessment {
    pub equivalents: Vec<TheveninEquivalent>,
    pub substations: Vec<SubstationEquivalent>,
    pub report: StabilityReport,
}

/// Estimates every node of every window and reports at the latest frames.
pub fn assess(
    windows: &[MeasurementWindow],
    config: &EstimatorConfig,
    band: f64,
) -> Result<Assessment, MonitorError> {
    if windows.is_empty() {
        return Err(MonitorError::NoFrames);
    }
    let mut equivalents = Vec::new();
    let mut substations = Vec::new();
    for w in windows {
        equivalents.extend(estimate_window(w, config)?);
        // substations without a metered current have no transmission-side index
        match estimate_substation(w, config) {
            Ok(s) => substations.push(s),
            Err(EstimatorError::MissingSubstationCurrent(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }
    let latest: Vec<&MeasurementFrame> = windows.iter().map(|w| w.latest()).collect();
    let report = build_report(&equivalents, &latest, &substations, band)?;
    Ok(Assessment {
        equivalents,
        substations,
        report,
    })
}

/// Assessment of the last `window` frames of each substation.
pub fn assess_latest(
    frames: &[MeasurementFrame],
    window: usize,
    config: &EstimatorConfig,
    band: f64,
) -> Result<Assessment, MonitorError> {
    let windows = group_by_substation(frames)
        .into_values()
        .map(|g| {
            let start = g.len().saturating_sub(window.max(1));
            MeasurementWindow::new(g[start..].to_vec())
        })
        .collect::<Result<Vec<_>, _>>()?;
    assess(&windows, config, band)
}

/// Reports over a sliding window, keyed by the frame index of the window
/// end. Substations are paired by window position.
pub fn monitor_frames(
    frames: &[MeasurementFrame],
    size: usize,
    stride: usize,
    config: &EstimatorConfig,
    band: f64,
) -> Result<Vec<(usize, Assessment)>, MonitorError> {
    let windows = sliding_windows(frames, size, stride)?;
    let mut by_end: std::collections::BTreeMap<usize, Vec<MeasurementWindow>> = Default::default();
    for w in windows {
        by_end.entry(w.latest().k).or_default().push(w);
    }
    by_end
        .into_iter()
        .map(|(k, ws)| Ok((k, assess(&ws, config, band)?)))
        .collect()
}

#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub nose: NoseOptions,
    /// μPMU nodes; empty means every loaded node.
    pub placement: Vec<String>,
    /// Frames per estimation window.
    pub window: usize,
    /// Relative depth of the load excitation inside each window.
    pub amplitude: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub estimator: EstimatorConfig,
    pub band: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            nose: NoseOptions::default(),
            placement: Vec::new(),
            window: 20,
            amplitude: 1e-3,
            noise_sigma: 0.0,
            seed: 0,
            estimator: EstimatorConfig::default(),
            band: BOUNDARY_BAND,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub lambda: f64,
    pub total_p: f64,
    pub assessment: Assessment,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub lambda_max: f64,
    pub rows: Vec<SweepRow>,
    /// Set when the pipeline failed part-way; rows up to that point are kept.
    pub error: Option<String>,
}

/// Estimation window ending at the solved operating point `at`. Excitation
/// points without a power-flow solution (possible right at the nose, where
/// lowering one phase can still push another past its limit) are left out;
/// the frame at `at.lambda` itself is always present.
pub fn window_at(
    model: &NetworkModel,
    at: &SolveResult,
    placement: &[String],
    opts: &SweepOptions,
    seed: u64,
) -> Result<Vec<MeasurementFrame>, MonitorError> {
    let points = excitation_points(at.lambda, opts.window, opts.amplitude, seed);
    let mut frames = Vec::with_capacity(points.len());
    let mut k = 0;
    for p in &points[..points.len().saturating_sub(1)] {
        let solved = sample_points_from(model, std::slice::from_ref(p), placement, &opts.nose.solver, Some(at));
        match solved {
            Ok(fs) => {
                frames.extend(fs.into_iter().map(|f| MeasurementFrame { k, t: k as f64 * FRAME_INTERVAL, ..f }));
                k += 1;
            }
            Err(e) if is_divergence(&e.error) => {}
            Err(e) => return Err(e.error.into()),
        }
    }
    frames.extend(frames_from_solution(model, at, k, placement)?);
    if opts.noise_sigma > 0.0 {
        return Ok(add_noise(&frames, opts.noise_sigma, seed ^ 0x9e37_79b9)?);
    }
    Ok(frames)
}

fn is_divergence(e: &MeasurementError) -> bool {
    matches!(e, MeasurementError::PowerFlow { source, .. } if source.is_divergence())
}

/// Continuation up to the nose, then one assessment per accepted λ.
pub fn sweep(model: &NetworkModel, opts: &SweepOptions) -> Result<SweepResult, MonitorError> {
    let nose = find_lambda_max_with(model, &opts.nose)?;
    let placement = if opts.placement.is_empty() {
        model.load_nodes()
    } else {
        opts.placement.clone()
    };
    let mut rows = Vec::with_capacity(nose.trajectory.len());
    let mut error = None;
    for (n, (lambda, at)) in nose.trajectory.iter().enumerate() {
        let step = window_at(model, at, &placement, opts, opts.seed.wrapping_add(n as u64))
            .and_then(|frames| assess_latest(&frames, opts.window, &opts.estimator, opts.band));
        match step {
            Ok(assessment) => rows.push(SweepRow {
                lambda: *lambda,
                total_p: at.load_power.re,
                assessment,
            }),
            Err(e) => {
                error = Some(format!("at λ = {lambda}: {e}"));
                break;
            }
        }
    }
    Ok(SweepResult {
        lambda_max: nose.lambda_max,
        rows,
        error,
    })
}

impl SweepResult {
    pub fn last(&self) -> Option<&SweepRow> {
        self.rows.last()
    }

    /// Wide table: `lambda,total_p`, then `vsi_3ph:<node>` and `tddi:<node>`
    /// per node and `vsi_t:<substation>` per substation.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let Some(first) = self.rows.first() else {
            out.write_record(["lambda", "total_p"])?;
            out.flush()?;
            return Ok(());
        };
        let nodes: Vec<&str> = first.assessment.report.nodes.iter().map(|n| n.node.as_str()).collect();
        let subs: Vec<&str> = first
            .assessment
            .report
            .substations
            .iter()
            .map(|s| s.substation.as_str())
            .collect();
        let mut header = vec!["lambda".to_string(), "total_p".to_string()];
        header.extend(nodes.iter().map(|n| format!("vsi_3ph:{n}")));
        header.extend(subs.iter().map(|s| format!("vsi_t:{s}")));
        header.extend(nodes.iter().map(|n| format!("tddi:{n}")));
        out.write_record(&header)?;
        let num = |x: Option<f64>| x.map(|x| format!("{x:.15e}")).unwrap_or_default();
        for row in &self.rows {
            let r = &row.assessment.report;
            let mut rec = vec![num(Some(row.lambda)), num(Some(row.total_p))];
            rec.extend(nodes.iter().map(|n| num(r.node(n).map(|x| x.vsi_3ph))));
            rec.extend(subs.iter().map(|s| num(r.vsi_t(s))));
            rec.extend(nodes.iter().map(|n| num(r.node(n).map(|x| x.tddi))));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;
    use crate::indices::vsi_t_crit_closed_form;
    use crate::measurement::sample_points;
    use crate::network::LoadModel;
    use crate::powerflow::SolverOptions;

    #[test]
    fn chain_sweep_ends_at_unit_index() {
        let r = sweep(&cases::chain_case(1), &SweepOptions::default()).unwrap();
        assert!(r.error.is_none(), "{:?}", r.error);
        let last = r.last().unwrap();
        assert!((last.lambda - r.lambda_max).abs() < 1e-12);
        assert!((last.assessment.report.critical().vsi_3ph - 1.0).abs() < 1e-2);
        let vsi_t = last.assessment.report.vsi_t("SUB").unwrap();
        assert!((vsi_t - vsi_t_crit_closed_form(0.08, 0.02)).abs() < 1e-2);
        // loss ratio grows with loading along the curve
        for w in r.rows.windows(2) {
            assert!(w[1].assessment.report.critical().vsi_3ph > w[0].assessment.report.critical().vsi_3ph);
        }
    }

    #[test]
    fn transmission_only_indices_coincide() {
        let m = cases::transmission_only_chain(LoadModel::ConstantPower);
        let opts = SweepOptions {
            placement: vec!["SUB".into()],
            ..Default::default()
        };
        let r = sweep(&m, &opts).unwrap();
        assert!(r.error.is_none(), "{:?}", r.error);
        for row in &r.rows {
            let rep = &row.assessment.report;
            let gap = (rep.critical().vsi_3ph - rep.vsi_t("SUB").unwrap()).abs();
            assert!(gap < 1e-6, "λ = {}: gap {gap}", row.lambda);
        }
    }

    #[test]
    fn sweep_csv_shape() {
        let m = cases::chain_case(2);
        let r = sweep(&m, &SweepOptions::default()).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "lambda,total_p,vsi_3ph:LD,vsi_t:SUB,tddi:LD");
        assert_eq!(lines.count(), r.rows.len());
    }

    #[test]
    fn sliding_monitor_reports_each_window() {
        let m = cases::unbalanced_chain(1);
        let points = excitation_points(0.4, 30, 0.05, 3);
        let frames = sample_points(&m, &points, &["LD".to_string()], &SolverOptions::default()).unwrap();
        let out = monitor_frames(&frames, 10, 5, &EstimatorConfig::default(), BOUNDARY_BAND).unwrap();
        assert_eq!(out.iter().map(|(k, _)| *k).collect::<Vec<_>>(), vec![9, 14, 19, 24, 29]);
        let z_t = m.transmission[0].z;
        for (_, a) in &out {
            assert!(a.equivalents[0].z_eq_t.max_abs_diff(&z_t) < 1e-8);
        }
        assert!(matches!(assess(&[], &EstimatorConfig::default(), BOUNDARY_BAND), Err(MonitorError::NoFrames)));
    }
}
