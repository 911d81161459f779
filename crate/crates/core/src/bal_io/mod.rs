//! Bundle Adjustment in the Large (BAL) problem files.
//!
//! ## Format
//!
//! ```text
//! <num_cameras> <num_points> <num_observations>
//! <camera_index> <point_index> <x> <y>        (num_observations lines)
//! <9 reals per camera>                        (rx ry rz tx ty tz f k1 k2)
//! <3 reals per point>
//! ```
//!
//! The camera and point blocks are whitespace separated and may be split
//! across lines arbitrarily. A file that ends right after the observations is
//! accepted as an observation-only problem. Gzip input is detected by its
//! magic bytes.
//!
//! Cameras follow the Bundler convention: `P = R X + t`, `p = -P.xy / P.z`,
//! pixel `= f * (1 + k1 |p|² + k2 |p|⁴) * p`.

mod init;

pub use init::{camera_from_vec, camera_to_vec, random_init, ProjectiveState};

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use nalgebra::{Matrix3, Matrix3x4, Rotation3, Vector2, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BalError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed header: {message}")]
    Header { line: usize, message: String },
    #[error("line {line}: expected a number, found `{token}`")]
    NotNumeric { line: usize, token: String },
    #[error("line {line}: {kind} index {index} out of range (count {count})")]
    IndexOutOfRange {
        line: usize,
        kind: &'static str,
        index: usize,
        count: usize,
    },
    #[error("line {line}: malformed observation: {message}")]
    Observation { line: usize, message: String },
    #[error("line {line}: file truncated, expected {expected}")]
    Truncated { line: usize, expected: String },
    #[error("duplicate observation of landmark {landmark} by camera {camera}")]
    DuplicateObservation { camera: usize, landmark: usize },
    #[error("invalid problem: {0}")]
    Invalid(String),
}

/// One 2D measurement `m_ij` of landmark `j` in camera `i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub camera_index: usize,
    pub landmark_index: usize,
    pub measurement: Vector2<f64>,
}

/// Bundler camera parameters stored in BAL files.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricCamera {
    /// Angle-axis rotation (world to camera).
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
    pub focal_length: f64,
    pub k1: f64,
    pub k2: f64,
}

impl MetricCamera {
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Rotation3::new(self.rotation).into_inner()
    }

    /// Intrinsics `K` such that `π(K [R | t] X)` reproduces the undistorted
    /// Bundler projection. The sign flip encodes the `-z` viewing direction.
    pub fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::new(-self.focal_length, -self.focal_length, 1.0))
    }

    /// `K [R | t]`, ignoring radial distortion.
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        rt.set_column(3, &self.translation);
        self.intrinsics() * rt
    }

    /// Full Bundler projection including radial distortion.
    pub fn project(&self, point: &Vector3<f64>) -> Vector2<f64> {
        let pc = self.rotation_matrix() * point + self.translation;
        let p = -pc.xy() / pc.z;
        let r2 = p.norm_squared();
        let distortion = 1.0 + self.k1 * r2 + self.k2 * r2 * r2;
        p * (self.focal_length * distortion)
    }
}

/// Outcome of [`BaProblem::prune`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PruneReport {
    pub removed_landmarks: usize,
    pub removed_cameras: usize,
    pub removed_observations: usize,
}

/// Observation graph of a bundle adjustment problem.
#[derive(Debug, Clone, PartialEq)]
pub struct BaProblem {
    num_cameras: usize,
    num_landmarks: usize,
    observations: Vec<Observation>,
    metric_cameras: Option<Vec<MetricCamera>>,
    metric_points: Option<Vec<Vector3<f64>>>,
    /// Observation indices per landmark, sorted by camera index.
    tracks: Vec<Vec<usize>>,
}

impl BaProblem {
    pub fn new(num_cameras: usize, num_landmarks: usize, observations: Vec<Observation>) -> Result<Self, BalError> {
        for obs in &observations {
            if obs.camera_index >= num_cameras {
                return Err(BalError::Invalid(format!(
                    "camera index {} out of range ({num_cameras} cameras)",
                    obs.camera_index
                )));
            }
            if obs.landmark_index >= num_landmarks {
                return Err(BalError::Invalid(format!(
                    "landmark index {} out of range ({num_landmarks} landmarks)",
                    obs.landmark_index
                )));
            }
        }
        let tracks = build_tracks(num_landmarks, &observations)?;
        Ok(Self {
            num_cameras,
            num_landmarks,
            observations,
            metric_cameras: None,
            metric_points: None,
            tracks,
        })
    }

    pub fn with_metric(mut self, cameras: Vec<MetricCamera>, points: Vec<Vector3<f64>>) -> Result<Self, BalError> {
        if cameras.len() != self.num_cameras || points.len() != self.num_landmarks {
            return Err(BalError::Invalid(format!(
                "metric block sizes {}/{} do not match {}/{}",
                cameras.len(),
                points.len(),
                self.num_cameras,
                self.num_landmarks
            )));
        }
        self.metric_cameras = Some(cameras);
        self.metric_points = Some(points);
        Ok(self)
    }

    pub fn num_cameras(&self) -> usize {
        self.num_cameras
    }

    pub fn num_landmarks(&self) -> usize {
        self.num_landmarks
    }

    pub fn num_observations(&self) -> usize {
        self.observations.len()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn metric_cameras(&self) -> Option<&[MetricCamera]> {
        self.metric_cameras.as_deref()
    }

    pub fn metric_points(&self) -> Option<&[Vector3<f64>]> {
        self.metric_points.as_deref()
    }

    /// Observation indices of landmark `j`, ordered by camera index.
    pub fn track(&self, landmark: usize) -> &[usize] {
        &self.tracks[landmark]
    }

    /// Removes landmarks seen by fewer than `min_cameras` cameras, then any
    /// camera left without observations. Indices are compacted preserving
    /// order.
    pub fn prune(&self, min_cameras: usize) -> (BaProblem, PruneReport) {
        let keep_landmark: Vec<bool> = self.tracks.iter().map(|t| t.len() >= min_cameras).collect();
        let mut camera_used = vec![false; self.num_cameras];
        for obs in &self.observations {
            if keep_landmark[obs.landmark_index] {
                camera_used[obs.camera_index] = true;
            }
        }
        let remap = |keep: &[bool]| -> (Vec<Option<usize>>, usize) {
            let mut next = 0;
            let map = keep
                .iter()
                .map(|&k| {
                    k.then(|| {
                        next += 1;
                        next - 1
                    })
                })
                .collect();
            (map, next)
        };
        let (landmark_map, num_landmarks) = remap(&keep_landmark);
        let (camera_map, num_cameras) = remap(&camera_used);

        let observations: Vec<Observation> = self
            .observations
            .iter()
            .filter_map(|obs| {
                Some(Observation {
                    camera_index: camera_map[obs.camera_index]?,
                    landmark_index: landmark_map[obs.landmark_index]?,
                    measurement: obs.measurement,
                })
            })
            .collect();
        let report = PruneReport {
            removed_landmarks: self.num_landmarks - num_landmarks,
            removed_cameras: self.num_cameras - num_cameras,
            removed_observations: self.observations.len() - observations.len(),
        };
        if report.removed_landmarks > 0 || report.removed_cameras > 0 {
            log::info!(
                "pruned {} landmarks, {} cameras, {} observations",
                report.removed_landmarks,
                report.removed_cameras,
                report.removed_observations
            );
        }

        let tracks = build_tracks(num_landmarks, &observations).expect("pruning cannot create duplicates");
        let metric_cameras = self.metric_cameras.as_ref().map(|cams| {
            cams.iter()
                .zip(&camera_used)
                .filter_map(|(c, &k)| k.then_some(*c))
                .collect()
        });
        let metric_points = self.metric_points.as_ref().map(|pts| {
            pts.iter()
                .zip(&keep_landmark)
                .filter_map(|(p, &k)| k.then_some(*p))
                .collect()
        });
        (
            BaProblem {
                num_cameras,
                num_landmarks,
                observations,
                metric_cameras,
                metric_points,
                tracks,
            },
            report,
        )
    }
}

fn build_tracks(num_landmarks: usize, observations: &[Observation]) -> Result<Vec<Vec<usize>>, BalError> {
    let mut tracks = vec![Vec::new(); num_landmarks];
    for (k, obs) in observations.iter().enumerate() {
        tracks[obs.landmark_index].push(k);
    }
    for track in &mut tracks {
        track.sort_by_key(|&k| observations[k].camera_index);
        for pair in track.windows(2) {
            let (a, b) = (&observations[pair[0]], &observations[pair[1]]);
            if a.camera_index == b.camera_index {
                return Err(BalError::DuplicateObservation {
                    camera: a.camera_index,
                    landmark: a.landmark_index,
                });
            }
        }
    }
    Ok(tracks)
}

/// Whitespace token stream that remembers line numbers.
struct Tokens<R> {
    lines: std::io::Lines<R>,
    line_no: usize,
    pending: std::vec::IntoIter<String>,
}

impl<R: BufRead> Tokens<R> {
    fn new(reader: R) -> Self {
        Self {
            lines: reader.lines(),
            line_no: 0,
            pending: Vec::new().into_iter(),
        }
    }

    /// Next non-empty line split into tokens. Only valid when no tokens are pending.
    fn next_line(&mut self) -> Result<Option<Vec<String>>, BalError> {
        for line in self.lines.by_ref() {
            self.line_no += 1;
            let line = line.map_err(|source| BalError::Io {
                path: format!("<stream line {}>", self.line_no),
                source,
            })?;
            let tokens: Vec<String> = line.split_whitespace().map(str::to_owned).collect();
            if !tokens.is_empty() {
                return Ok(Some(tokens));
            }
        }
        Ok(None)
    }

    fn next_token(&mut self) -> Result<Option<String>, BalError> {
        loop {
            if let Some(tok) = self.pending.next() {
                return Ok(Some(tok));
            }
            match self.next_line()? {
                Some(tokens) => self.pending = tokens.into_iter(),
                None => return Ok(None),
            }
        }
    }

    fn next_real(&mut self, what: &str) -> Result<f64, BalError> {
        let tok = self.next_token()?.ok_or_else(|| BalError::Truncated {
            line: self.line_no,
            expected: what.to_owned(),
        })?;
        parse_real(&tok, self.line_no)
    }
}

fn parse_real(tok: &str, line: usize) -> Result<f64, BalError> {
    tok.parse::<f64>().map_err(|_| BalError::NotNumeric {
        line,
        token: tok.to_owned(),
    })
}

fn parse_index(tok: &str, line: usize) -> Result<usize, BalError> {
    tok.parse::<usize>().map_err(|_| BalError::NotNumeric {
        line,
        token: tok.to_owned(),
    })
}

/// Parses a BAL text stream.
pub fn parse_bal<R: Read>(reader: R) -> Result<BaProblem, BalError> {
    let mut tokens = Tokens::new(BufReader::new(reader));

    let header = tokens.next_line()?.ok_or(BalError::Header {
        line: 1,
        message: "empty input".into(),
    })?;
    let line = tokens.line_no;
    if header.len() != 3 {
        return Err(BalError::Header {
            line,
            message: format!("expected 3 counts, found {} tokens", header.len()),
        });
    }
    let counts = header
        .iter()
        .map(|t| {
            t.parse::<usize>().map_err(|_| BalError::Header {
                line,
                message: format!("`{t}` is not a non-negative integer"),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (num_cameras, num_landmarks, num_observations) = (counts[0], counts[1], counts[2]);

    let mut observations = Vec::with_capacity(num_observations);
    for k in 0..num_observations {
        let fields = tokens.next_line()?.ok_or_else(|| BalError::Truncated {
            line: tokens.line_no,
            expected: format!("{num_observations} observations, found {k}"),
        })?;
        let line = tokens.line_no;
        if fields.len() != 4 {
            return Err(BalError::Observation {
                line,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let camera_index = parse_index(&fields[0], line)?;
        let landmark_index = parse_index(&fields[1], line)?;
        if camera_index >= num_cameras {
            return Err(BalError::IndexOutOfRange {
                line,
                kind: "camera",
                index: camera_index,
                count: num_cameras,
            });
        }
        if landmark_index >= num_landmarks {
            return Err(BalError::IndexOutOfRange {
                line,
                kind: "point",
                index: landmark_index,
                count: num_landmarks,
            });
        }
        let x = parse_real(&fields[2], line)?;
        let y = parse_real(&fields[3], line)?;
        observations.push(Observation {
            camera_index,
            landmark_index,
            measurement: Vector2::new(x, y),
        });
    }

    let problem = BaProblem::new(num_cameras, num_landmarks, observations)?;

    let Some(first) = tokens.next_token()? else {
        return Ok(problem);
    };
    let mut first = Some(parse_real(&first, tokens.line_no)?);
    let mut cameras = Vec::with_capacity(num_cameras);
    for i in 0..num_cameras {
        let mut p = [0.0; 9];
        for (k, slot) in p.iter_mut().enumerate() {
            *slot = match first.take() {
                Some(v) => v,
                None => tokens.next_real(&format!("camera {i} parameter {k}"))?,
            };
        }
        cameras.push(MetricCamera {
            rotation: Vector3::new(p[0], p[1], p[2]),
            translation: Vector3::new(p[3], p[4], p[5]),
            focal_length: p[6],
            k1: p[7],
            k2: p[8],
        });
    }
    let mut points = Vec::with_capacity(num_landmarks);
    for j in 0..num_landmarks {
        let mut p = [0.0; 3];
        for (k, slot) in p.iter_mut().enumerate() {
            *slot = match first.take() {
                Some(v) => v,
                None => tokens.next_real(&format!("point {j} coordinate {k}"))?,
            };
        }
        points.push(Vector3::from(p));
    }
    if let Some(extra) = tokens.next_token()? {
        return Err(BalError::Observation {
            line: tokens.line_no,
            message: format!("unexpected trailing token `{extra}`"),
        });
    }
    problem.with_metric(cameras, points)
}

/// Reads a BAL file from disk, transparently decompressing gzip.
pub fn read_bal_file(path: impl AsRef<Path>) -> Result<BaProblem, BalError> {
    let path = path.as_ref();
    let io_err = |source| BalError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = File::open(path).map_err(io_err)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(io_err)?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        parse_bal(GzDecoder::new(bytes.as_slice()))
    } else {
        parse_bal(bytes.as_slice())
    }
}

/// Serializes a problem in BAL format. Reals use the shortest representation
/// that parses back to the same `f64`.
pub fn write_bal<W: Write>(problem: &BaProblem, mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "{} {} {}",
        problem.num_cameras,
        problem.num_landmarks,
        problem.observations.len()
    )?;
    for obs in &problem.observations {
        writeln!(
            out,
            "{} {} {:e} {:e}",
            obs.camera_index, obs.landmark_index, obs.measurement.x, obs.measurement.y
        )?;
    }
    if let (Some(cams), Some(pts)) = (&problem.metric_cameras, &problem.metric_points) {
        for cam in cams {
            for v in cam.rotation.iter().chain(cam.translation.iter()) {
                writeln!(out, "{v:e}")?;
            }
            writeln!(out, "{:e}\n{:e}\n{:e}", cam.focal_length, cam.k1, cam.k2)?;
        }
        for p in pts {
            writeln!(out, "{:e}\n{:e}\n{:e}", p.x, p.y, p.z)?;
        }
    }
    Ok(())
}
