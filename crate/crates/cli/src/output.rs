//! Plain-text artifacts written next to the trace CSV and the summary.

use std::io::{self, Write};

use povar::metric_upgrade::MetricUpgrade;
use povar::ProjectiveState;

/// Cameras as row-major 12-vectors, then homogeneous landmarks.
pub fn write_state<W: Write>(state: &ProjectiveState, mut out: W) -> io::Result<()> {
    writeln!(out, "# povar projective state")?;
    writeln!(out, "cameras {}", state.cameras.len())?;
    for cam in &state.cameras {
        let row: Vec<String> = cam.transpose().iter().map(|v| format!("{v:e}")).collect();
        writeln!(out, "{}", row.join(" "))?;
    }
    writeln!(out, "landmarks {}", state.landmarks.len())?;
    for l in &state.landmarks {
        writeln!(out, "{:e} {:e} {:e} {:e}", l[0], l[1], l[2], l[3])?;
    }
    Ok(())
}

/// Per camera the row-major rotation followed by the translation, then the
/// Euclidean points.
pub fn write_metric<W: Write>(metric: &MetricUpgrade, mut out: W) -> io::Result<()> {
    writeln!(out, "# povar metric reconstruction")?;
    writeln!(out, "cameras {}", metric.rotations.len())?;
    for (r, t) in metric.rotations.iter().zip(&metric.translations) {
        let row: Vec<String> = r.transpose().iter().chain(t.iter()).map(|v| format!("{v:e}")).collect();
        writeln!(out, "{}", row.join(" "))?;
    }
    writeln!(out, "points {}", metric.points.len())?;
    for p in &metric.points {
        writeln!(out, "{:e} {:e} {:e}", p.x, p.y, p.z)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3x4, Vector4};

    #[test]
    fn state_layout() {
        let state = ProjectiveState {
            cameras: vec![Matrix3x4::from_row_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0])],
            landmarks: vec![Vector4::new(0.5, 0.0, -1.0, 1.0)],
        };
        let mut buf = Vec::new();
        write_state(&state, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "# povar projective state\ncameras 1\n1e0 2e0 3e0 4e0 5e0 6e0 7e0 8e0 9e0 1e1 1.1e1 1.2e1\nlandmarks 1\n5e-1 0e0 -1e0 1e0\n"
        );
    }
}
