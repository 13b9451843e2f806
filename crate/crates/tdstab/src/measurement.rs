//! Synchronized PMU (substation) and μPMU (feeder node) phasor frames:
//! sampling from power-flow solutions, noise, CSV persistence and windows.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{scale_loading_by_phase, NetworkModel};
use crate::phasor::{C64, Phasor3};
use crate::powerflow::{solve_warm_scaled, PowerFlowError, SolveResult, SolverOptions};

/// Frame spacing used when timestamps are generated (30 frames per second).
pub const FRAME_INTERVAL: f64 = 1.0 / 30.0;

/// Column order of the measurement CSV.
pub const CSV_COLUMNS: [&str; 17] = [
    "k", "t", "device_id", "kind", "node", "Va_re", "Va_im", "Vb_re", "Vb_im", "Vc_re", "Vc_im",
    "Ia_re", "Ia_im", "Ib_re", "Ib_im", "Ic_re", "Ic_im",
];

#[derive(Debug, Error)]
pub enum MeasurementError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}, column `{column}`: {reason}")]
    Parse {
        line: usize,
        column: String,
        reason: String,
    },
    #[error("power flow failed at lambda = {lambda}: {source}")]
    PowerFlow {
        lambda: f64,
        #[source]
        source: PowerFlowError,
    },
    #[error("unknown measurement node `{0}`")]
    UnknownNode(String),
    #[error("inconsistent window: {0}")]
    Inconsistent(String),
    #[error("noise level must be finite and non-negative, got {0}")]
    BadSigma(f64),
}

/// μPMU channel at a feeder node: node voltage and the load current drawn
/// at that node.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub v_d: Phasor3,
    pub i_l: Phasor3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementFrame {
    pub k: usize,
    pub t: f64,
    pub substation_id: String,
    /// Substation bus voltage seen by the PMU.
    pub v_t: Phasor3,
    /// Aggregate current into the substation's feeders, when metered.
    pub i_t: Option<Phasor3>,
    pub channels: BTreeMap<String, Channel>,
}

impl MeasurementFrame {
    pub fn is_finite(&self) -> bool {
        self.v_t.is_finite()
            && self.i_t.is_none_or(|i| i.is_finite())
            && self
                .channels
                .values()
                .all(|c| c.v_d.is_finite() && c.i_l.is_finite())
    }
}

/// Consecutive frames of one substation sharing a channel set.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementWindow {
    frames: Vec<MeasurementFrame>,
}

impl MeasurementWindow {
    pub fn new(frames: Vec<MeasurementFrame>) -> Result<Self, MeasurementError> {
        let Some(first) = frames.first() else {
            return Err(MeasurementError::Inconsistent("empty window".into()));
        };
        let sub = &first.substation_id;
        let keys: Vec<&String> = first.channels.keys().collect();
        for f in &frames {
            if &f.substation_id != sub {
                return Err(MeasurementError::Inconsistent(format!(
                    "frame {} belongs to substation `{}`, expected `{sub}`",
                    f.k, f.substation_id
                )));
            }
            if f.channels.keys().collect::<Vec<_>>() != keys {
                return Err(MeasurementError::Inconsistent(format!(
                    "frame {} has a different channel set",
                    f.k
                )));
            }
            if !f.is_finite() {
                return Err(MeasurementError::Inconsistent(format!(
                    "frame {} holds non-finite phasors",
                    f.k
                )));
            }
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[MeasurementFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn substation_id(&self) -> &str {
        &self.frames[0].substation_id
    }

    pub fn nodes(&self) -> impl Iterator<Item = &str> {
        self.frames[0].channels.keys().map(String::as_str)
    }

    pub fn latest(&self) -> &MeasurementFrame {
        self.frames.last().expect("window is non-empty")
    }
}

/// Splits frames by substation, keeping their order.
pub fn group_by_substation(frames: &[MeasurementFrame]) -> BTreeMap<String, Vec<MeasurementFrame>> {
    let mut out: BTreeMap<String, Vec<MeasurementFrame>> = BTreeMap::new();
    for f in frames {
        out.entry(f.substation_id.clone()).or_default().push(f.clone());
    }
    out
}

/// Sliding windows of `size` frames advanced by `stride` over each
/// substation's frames.
pub fn sliding_windows(
    frames: &[MeasurementFrame],
    size: usize,
    stride: usize,
) -> Result<Vec<MeasurementWindow>, MeasurementError> {
    let stride = stride.max(1);
    let mut out = Vec::new();
    for group in group_by_substation(frames).into_values() {
        if group.len() < size || size == 0 {
            out.push(MeasurementWindow::new(group)?);
            continue;
        }
        let mut start = 0;
        while start + size <= group.len() {
            out.push(MeasurementWindow::new(group[start..start + size].to_vec())?);
            start += stride;
        }
    }
    Ok(out)
}

/// Groups μPMU nodes by substation, in placement order.
fn placement_by_substation<'a>(
    model: &'a NetworkModel,
    placement: &'a [String],
) -> Result<Vec<(&'a str, Vec<&'a str>)>, MeasurementError> {
    let mut out: Vec<(&str, Vec<&str>)> = Vec::new();
    for node in placement {
        let sub = model
            .substation_of(node)
            .ok_or_else(|| MeasurementError::UnknownNode(node.clone()))?;
        match out.iter_mut().find(|(s, _)| *s == sub) {
            Some((_, nodes)) => nodes.push(node),
            None => out.push((sub, vec![node])),
        }
    }
    Ok(out)
}

/// Reads one frame per placed substation off a converged solution.
pub fn frames_from_solution(
    model: &NetworkModel,
    result: &SolveResult,
    k: usize,
    placement: &[String],
) -> Result<Vec<MeasurementFrame>, MeasurementError> {
    let mut out = Vec::new();
    for (sub, nodes) in placement_by_substation(model, placement)? {
        let mut channels = BTreeMap::new();
        for node in nodes {
            let v_d = *result
                .voltage(node)
                .ok_or_else(|| MeasurementError::UnknownNode(node.to_string()))?;
            let i_l = node_current(result, node);
            channels.insert(node.to_string(), Channel { v_d, i_l });
        }
        out.push(MeasurementFrame {
            k,
            t: k as f64 * FRAME_INTERVAL,
            substation_id: sub.to_string(),
            v_t: result.node_voltages[sub],
            i_t: result.substation_currents.get(sub).copied(),
            channels,
        });
    }
    Ok(out)
}

fn node_current(result: &SolveResult, node: &str) -> Phasor3 {
    result.load_currents.get(node).copied().unwrap_or_default()
}

/// Loading of one frame: overall factor and per-phase multipliers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoadPoint {
    pub lambda: f64,
    pub phase_factors: [f64; 3],
}

impl LoadPoint {
    pub fn uniform(lambda: f64) -> Self {
        Self {
            lambda,
            phase_factors: [1.0; 3],
        }
    }
}

/// Frames sampled before a solve failed, and the failure.
#[derive(Debug)]
pub struct PartialSample {
    pub frames: Vec<MeasurementFrame>,
    pub error: MeasurementError,
}

/// Solves the model at each point (warm-starting from the previous one) and
/// samples the placed nodes. Frame `k` corresponds to `points[k]`.
pub fn sample_points(
    model: &NetworkModel,
    points: &[LoadPoint],
    placement: &[String],
    opts: &SolverOptions,
) -> Result<Vec<MeasurementFrame>, MeasurementError> {
    sample_points_from(model, points, placement, opts, None).map_err(|p| p.error)
}

/// [`sample_points`] with an initial guess for the first solve. On failure
/// the frames of the points solved so far are kept.
pub fn sample_points_from(
    model: &NetworkModel,
    points: &[LoadPoint],
    placement: &[String],
    opts: &SolverOptions,
    warm: Option<&SolveResult>,
) -> Result<Vec<MeasurementFrame>, PartialSample> {
    let mut out = Vec::new();
    if let Err(error) = placement_by_substation(model, placement) {
        return Err(PartialSample { frames: out, error });
    }
    let mut warm: Option<SolveResult> = warm.cloned();
    for (k, p) in points.iter().enumerate() {
        let fail = |source| MeasurementError::PowerFlow {
            lambda: p.lambda,
            source,
        };
        let step = scale_loading_by_phase(model, p.lambda, p.phase_factors)
            .map_err(|e| fail(e.into()))
            .and_then(|scaled| solve_warm_scaled(&scaled, p.lambda, opts, warm.as_ref()).map_err(fail))
            .and_then(|r| Ok((frames_from_solution(model, &r, k, placement)?, r)));
        match step {
            Ok((frames, r)) => {
                out.extend(frames);
                warm = Some(r);
            }
            Err(error) => return Err(PartialSample { frames: out, error }),
        }
    }
    Ok(out)
}

/// Exact solver phasors at each λ.
pub fn sample_trajectory(
    model: &NetworkModel,
    lambdas: &[f64],
    placement: &[String],
    opts: &SolverOptions,
) -> Result<Vec<MeasurementFrame>, MeasurementError> {
    let points: Vec<LoadPoint> = lambdas.iter().map(|&l| LoadPoint::uniform(l)).collect();
    sample_points(model, &points, placement, opts)
}

/// One point per λ, each phase lowered by a random fraction of up to
/// `excitation` so that consecutive frames are not collinear.
pub fn ramp_points(lambdas: &[f64], excitation: f64, seed: u64) -> Vec<LoadPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    lambdas
        .iter()
        .map(|&lambda| LoadPoint {
            lambda,
            phase_factors: [0; 3].map(|_| 1.0 - excitation * rng.random::<f64>()),
        })
        .collect()
}

/// `m` load points ending exactly at `lambda`. Earlier points lower the
/// loading by up to `amplitude` (relative) with independent per-phase
/// factors, so the load currents move in several directions.
pub fn excitation_points(lambda: f64, m: usize, amplitude: f64, seed: u64) -> Vec<LoadPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<LoadPoint> = (0..m.saturating_sub(1))
        .map(|_| {
            let common: f64 = rng.random();
            let phase_factors = [0; 3].map(|_| 1.0 - amplitude * rng.random::<f64>());
            LoadPoint {
                lambda: lambda * (1.0 - amplitude * common),
                phase_factors,
            }
        })
        .collect();
    if m > 0 {
        out.push(LoadPoint::uniform(lambda));
    }
    out
}

/// Adds zero-mean Gaussian noise to every phasor: the real and imaginary
/// parts of each phase get independent samples with standard deviation
/// `sigma_rel · |x|`.
pub fn add_noise(
    frames: &[MeasurementFrame],
    sigma_rel: f64,
    seed: u64,
) -> Result<Vec<MeasurementFrame>, MeasurementError> {
    if !(sigma_rel.is_finite() && sigma_rel >= 0.0) {
        return Err(MeasurementError::BadSigma(sigma_rel));
    }
    if sigma_rel == 0.0 {
        return Ok(frames.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut perturb = |x: &Phasor3| {
        let mut out = *x;
        for p in out.0.iter_mut() {
            let s = sigma_rel * p.norm();
            *p += C64::new(s * unit.sample(&mut rng), s * unit.sample(&mut rng));
        }
        out
    };
    Ok(frames
        .iter()
        .map(|f| {
            let mut f = f.clone();
            f.v_t = perturb(&f.v_t);
            f.i_t = f.i_t.as_ref().map(&mut perturb);
            for c in f.channels.values_mut() {
                c.v_d = perturb(&c.v_d);
                c.i_l = perturb(&c.i_l);
            }
            f
        })
        .collect())
}

fn pmu_id(sub: &str) -> String {
    format!("PMU-{sub}")
}

fn upmu_id(node: &str) -> String {
    format!("uPMU-{node}")
}

/// Writes frames as CSV: each frame is one PMU row followed by its μPMU rows.
pub fn write_frames_to<W: Write>(frames: &[MeasurementFrame], w: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_COLUMNS)?;
    let num = |x: f64| x.to_string();
    let phasor = |p: &Phasor3| p.iter().flat_map(|c| [num(c.re), num(c.im)]).collect::<Vec<_>>();
    for f in frames {
        let mut row = vec![
            f.k.to_string(),
            num(f.t),
            pmu_id(&f.substation_id),
            "PMU".into(),
            f.substation_id.clone(),
        ];
        row.extend(phasor(&f.v_t));
        match &f.i_t {
            Some(i) => row.extend(phasor(i)),
            None => row.extend(std::iter::repeat_n(String::new(), 6)),
        }
        out.write_record(&row)?;
        for (node, c) in &f.channels {
            let mut row = vec![
                f.k.to_string(),
                num(f.t),
                upmu_id(node),
                "uPMU".into(),
                node.clone(),
            ];
            row.extend(phasor(&c.v_d));
            row.extend(phasor(&c.i_l));
            out.write_record(&row)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_frames(frames: &[MeasurementFrame], path: impl AsRef<Path>) -> Result<(), MeasurementError> {
    let path = path.as_ref();
    let io = |source| MeasurementError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io)?;
    write_frames_to(frames, BufWriter::new(file)).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(e) => io(e),
        other => io(std::io::Error::other(format!("{other:?}"))),
    })
}

struct Row<'a> {
    line: usize,
    record: &'a csv::StringRecord,
}

impl Row<'_> {
    fn err(&self, col: usize, reason: impl Into<String>) -> MeasurementError {
        MeasurementError::Parse {
            line: self.line,
            column: CSV_COLUMNS[col].to_string(),
            reason: reason.into(),
        }
    }

    fn text(&self, col: usize) -> Result<&str, MeasurementError> {
        self.record
            .get(col)
            .ok_or_else(|| self.err(col, "missing value"))
    }

    fn float(&self, col: usize) -> Result<f64, MeasurementError> {
        let t = self.text(col)?;
        let x: f64 = t
            .trim()
            .parse()
            .map_err(|_| self.err(col, format!("not a number: `{t}`")))?;
        if !x.is_finite() {
            return Err(self.err(col, "non-finite value"));
        }
        Ok(x)
    }

    fn phasor(&self, start: usize) -> Result<Phasor3, MeasurementError> {
        let mut p = Phasor3::zero();
        for ph in 0..3 {
            p[ph] = C64::new(self.float(start + 2 * ph)?, self.float(start + 2 * ph + 1)?);
        }
        Ok(p)
    }

    fn optional_phasor(&self, start: usize) -> Result<Option<Phasor3>, MeasurementError> {
        let blank = (start..start + 6).all(|c| self.record.get(c).is_some_and(|t| t.trim().is_empty()));
        if blank {
            Ok(None)
        } else {
            self.phasor(start).map(Some)
        }
    }
}

pub fn read_frames_from<R: Read>(r: R) -> Result<Vec<MeasurementFrame>, MeasurementError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(r);
    let mut records = reader.records();
    let header = match records.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => {
            return Err(MeasurementError::Parse {
                line: 1,
                column: String::new(),
                reason: e.to_string(),
            })
        }
        None => {
            return Err(MeasurementError::Parse {
                line: 1,
                column: String::new(),
                reason: "empty file".into(),
            })
        }
    };
    for (i, col) in CSV_COLUMNS.iter().enumerate() {
        match header.get(i) {
            Some(h) if h.trim() == *col => {}
            Some(h) => {
                return Err(MeasurementError::Parse {
                    line: 1,
                    column: col.to_string(),
                    reason: format!("expected header `{col}`, found `{h}`"),
                })
            }
            None => {
                return Err(MeasurementError::Parse {
                    line: 1,
                    column: col.to_string(),
                    reason: "column missing from header".into(),
                })
            }
        }
    }
    if header.len() > CSV_COLUMNS.len() {
        return Err(MeasurementError::Parse {
            line: 1,
            column: header[CSV_COLUMNS.len()].to_string(),
            reason: "unexpected extra column".into(),
        });
    }

    let mut frames: Vec<MeasurementFrame> = Vec::new();
    for (n, rec) in records.enumerate() {
        let line = n + 2;
        let record = rec.map_err(|e| MeasurementError::Parse {
            line,
            column: String::new(),
            reason: e.to_string(),
        })?;
        let row = Row { line, record: &record };
        if record.len() < CSV_COLUMNS.len() {
            return Err(row.err(record.len(), "missing value"));
        }
        let k: usize = row
            .text(0)?
            .trim()
            .parse()
            .map_err(|_| row.err(0, "not a frame index"))?;
        let t = row.float(1)?;
        let node = row.text(4)?.to_string();
        match row.text(3)? {
            "PMU" => frames.push(MeasurementFrame {
                k,
                t,
                substation_id: node,
                v_t: row.phasor(5)?,
                i_t: row.optional_phasor(11)?,
                channels: BTreeMap::new(),
            }),
            "uPMU" => {
                let frame = frames
                    .last_mut()
                    .filter(|f| f.k == k)
                    .ok_or_else(|| row.err(0, "μPMU row without a preceding PMU row for this frame"))?;
                let channel = Channel {
                    v_d: row.phasor(5)?,
                    i_l: row.phasor(11)?,
                };
                if frame.channels.insert(node, channel).is_some() {
                    return Err(row.err(4, "node measured twice in one frame"));
                }
            }
            other => return Err(row.err(3, format!("unknown device kind `{other}`"))),
        }
    }
    Ok(frames)
}

pub fn read_frames(path: impl AsRef<Path>) -> Result<Vec<MeasurementFrame>, MeasurementError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| MeasurementError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_frames_from(std::io::BufReader::new(file))
}
