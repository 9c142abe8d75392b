//! Fixed-horizon trajectories, commands and the constant-curvature arc model
//! shared by the scene generator and the planner.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Future waypoints per trajectory (6 s at 2 Hz).
pub const FUTURE_LEN: usize = 12;
/// History waypoints per scene, the last one at the ego origin.
pub const HISTORY_LEN: usize = 4;
/// Waypoint spacing in seconds.
pub const DT: f64 = 0.5;
pub const NUM_MODES: usize = 3;

pub type Point = [f64; 2];

/// `FUTURE_LEN × 2` waypoints in the ego frame (meters, +x forward, +y left).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Trajectory(pub [Point; FUTURE_LEN]);

impl Trajectory {
    pub fn zeros() -> Self {
        Trajectory([[0.0; 2]; FUTURE_LEN])
    }

    pub fn from_fn(mut f: impl FnMut(usize) -> Point) -> Self {
        let mut out = [[0.0; 2]; FUTURE_LEN];
        for (k, p) in out.iter_mut().enumerate() {
            *p = f(k);
        }
        Trajectory(out)
    }

    pub fn points(&self) -> &[Point; FUTURE_LEN] {
        &self.0
    }

    /// Row-major flattening `[x0, y0, x1, y1, ...]`.
    pub fn flatten(&self) -> Vec<f64> {
        self.0.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() != FUTURE_LEN * 2 {
            return Err(Error::shape(
                "trajectory",
                format!("{} values, expected {}", values.len(), FUTURE_LEN * 2),
            ));
        }
        Ok(Self::from_fn(|k| [values[2 * k], values[2 * k + 1]]))
    }

    pub fn add(&self, other: &Trajectory) -> Trajectory {
        Self::from_fn(|k| [self.0[k][0] + other.0[k][0], self.0[k][1] + other.0[k][1]])
    }

    pub fn sub(&self, other: &Trajectory) -> Trajectory {
        Self::from_fn(|k| [self.0[k][0] - other.0[k][0], self.0[k][1] - other.0[k][1]])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

/// One trajectory per routing mode, ordered left, straight, right.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModeTrajectories(pub [Trajectory; NUM_MODES]);

impl ModeTrajectories {
    pub fn zeros() -> Self {
        ModeTrajectories([Trajectory::zeros(); NUM_MODES])
    }

    pub fn mode(&self, m: usize) -> &Trajectory {
        &self.0[m]
    }

    /// `3·FUTURE_LEN·2` values, mode-major.
    pub fn flatten(&self) -> Vec<f64> {
        self.0.iter().flat_map(Trajectory::flatten).collect()
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        let per = FUTURE_LEN * 2;
        if values.len() != NUM_MODES * per {
            return Err(Error::shape(
                "mode trajectories",
                format!("{} values, expected {}", values.len(), NUM_MODES * per),
            ));
        }
        Ok(ModeTrajectories([
            Trajectory::from_flat(&values[..per])?,
            Trajectory::from_flat(&values[per..2 * per])?,
            Trajectory::from_flat(&values[2 * per..])?,
        ]))
    }

    pub fn add(&self, other: &ModeTrajectories) -> ModeTrajectories {
        ModeTrajectories([
            self.0[0].add(&other.0[0]),
            self.0[1].add(&other.0[1]),
            self.0[2].add(&other.0[2]),
        ])
    }
}

/// Routing class of a command.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandClass {
    Left = 0,
    Straight = 1,
    Right = 2,
}

impl CommandClass {
    pub const ALL: [CommandClass; 3] = [CommandClass::Left, CommandClass::Straight, CommandClass::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// One-hot routing command over {left, straight, right}.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Command(pub [f64; 3]);

impl Command {
    pub fn one_hot(class: CommandClass) -> Self {
        let mut v = [0.0; 3];
        v[class.index()] = 1.0;
        Command(v)
    }

    /// The selected class; fails unless exactly one entry is 1 and the rest 0.
    pub fn class(&self) -> Result<CommandClass> {
        let ones = self.0.iter().filter(|&&v| v == 1.0).count();
        let zeros = self.0.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != 2 {
            return Err(Error::Command(format!("{:?} is not one-hot", self.0)));
        }
        let i = self.0.iter().position(|&v| v == 1.0).expect("one entry is 1");
        Ok(CommandClass::from_index(i).expect("index < 3"))
    }
}

impl From<CommandClass> for Command {
    fn from(c: CommandClass) -> Self {
        Command::one_hot(c)
    }
}

/// Position and partial derivatives along a constant-curvature arc that starts
/// at the origin heading +x.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArcPoint {
    pub x: f64,
    pub y: f64,
    /// d(x, y)/d(arc length)
    pub dx_ds: f64,
    pub dy_ds: f64,
    /// d(x, y)/d(curvature) at fixed arc length
    pub dx_dk: f64,
    pub dy_dk: f64,
}

const SERIES_LIMIT: f64 = 1e-2;

/// Exact arc geometry with series expansions near zero curvature.
pub fn arc_point(curvature: f64, s: f64) -> ArcPoint {
    let a = curvature * s;
    let (sin_a, cos_a) = a.sin_cos();
    // sinc(a) = sin a / a, cosc(a) = (1 - cos a) / a and their derivatives.
    let (sinc, cosc, dsinc, dcosc) = if a.abs() < SERIES_LIMIT {
        let a2 = a * a;
        (
            1.0 - a2 / 6.0 + a2 * a2 / 120.0,
            a / 2.0 - a * a2 / 24.0 + a * a2 * a2 / 720.0,
            -a / 3.0 + a * a2 / 30.0,
            0.5 - a2 / 8.0 + a2 * a2 / 144.0,
        )
    } else {
        (
            sin_a / a,
            (1.0 - cos_a) / a,
            (a * cos_a - sin_a) / (a * a),
            (a * sin_a - (1.0 - cos_a)) / (a * a),
        )
    };
    ArcPoint {
        x: s * sinc,
        y: s * cosc,
        dx_ds: cos_a,
        dy_ds: sin_a,
        dx_dk: s * s * dsinc,
        dy_dk: s * s * dcosc,
    }
}

/// Heading of the arc tangent after `s` meters.
pub fn arc_heading(curvature: f64, s: f64) -> f64 {
    curvature * s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_round_trip() {
        for c in CommandClass::ALL {
            assert_eq!(Command::one_hot(c).class().unwrap(), c);
        }
        assert!(Command([1.0, 1.0, 0.0]).class().is_err());
        assert!(Command([0.5, 0.5, 0.0]).class().is_err());
        assert!(Command([0.0, 0.0, 0.0]).class().is_err());
    }

    #[test]
    fn straight_arc_is_linear() {
        let p = arc_point(0.0, 7.5);
        assert_eq!((p.x, p.y), (7.5, 0.0));
    }

    #[test]
    fn quarter_circle_endpoint() {
        let r = 20.0;
        let p = arc_point(1.0 / r, r * std::f64::consts::FRAC_PI_2);
        assert!((p.x - r).abs() < 1e-12);
        assert!((p.y - r).abs() < 1e-12);
    }

    #[test]
    fn arc_derivatives_match_central_differences() {
        let h = 1e-6;
        for &k in &[-0.15, -0.03, -1e-4, 0.0, 2e-5, 0.004, 0.02, 0.15] {
            for &s in &[0.5, 3.0, 12.0, 40.0] {
                let p = arc_point(k, s);
                let (kp, km) = (arc_point(k + h, s), arc_point(k - h, s));
                let (sp, sm) = (arc_point(k, s + h), arc_point(k, s - h));
                let tol = |v: f64| 1e-6 * v.abs().max(1.0);
                assert!((p.dx_dk - (kp.x - km.x) / (2.0 * h)).abs() < tol(p.dx_dk) * 10.0, "k={k} s={s}");
                assert!((p.dy_dk - (kp.y - km.y) / (2.0 * h)).abs() < tol(p.dy_dk) * 10.0, "k={k} s={s}");
                assert!((p.dx_ds - (sp.x - sm.x) / (2.0 * h)).abs() < 1e-6);
                assert!((p.dy_ds - (sp.y - sm.y) / (2.0 * h)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn series_branch_matches_closed_form() {
        let s = 10.0;
        let k = SERIES_LIMIT / s * 0.99;
        let a = k * s;
        let p = arc_point(k, s);
        assert!((p.x - a.sin() / k).abs() < 1e-12);
        assert!((p.y - (1.0 - a.cos()) / k).abs() < 1e-12);
        let dy_dk = s * s * (a * a.sin() - (1.0 - a.cos())) / (a * a);
        assert!((p.dy_dk - dy_dk).abs() < 1e-8);
    }
}
