//! Location datasets: incremental clustering of posed images into locations,
//! TUM trajectory parsing and the location manifest format.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

/// Quaternions further than this from unit norm are rejected by [`pose_delta`].
pub const UNIT_TOLERANCE: f64 = 1e-6;
/// Quaternions read from trajectory files within this tolerance are renormalized.
pub const PARSE_TOLERANCE: f64 = 1e-3;
pub const DEFAULT_DIST_THRESH: f64 = 1.0;
pub const DEFAULT_ANGLE_THRESH: f64 = 30.0;

#[derive(Debug, Error)]
pub enum LocError {
    #[error("quaternion norm {norm} is not within {tol} of 1")]
    NonUnitQuaternion { norm: f64, tol: f64 },
    #[error("empty image sequence")]
    EmptySequence,
    #[error("thresholds must be positive (dist {dist}, angle {angle})")]
    BadThreshold { dist: f64, angle: f64 },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("image {0} is listed more than once")]
    DuplicateImage(String),
    #[error("scene {scene}: location id {id} is referenced but ids are not dense (expected 0..{count})")]
    UnknownLocation { scene: String, id: usize, count: usize },
    #[error("manifest contains no images")]
    EmptyManifest,
    #[error("{path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> LocError {
    LocError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Position in metres and orientation as `(qx, qy, qz, qw)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub position: [f64; 3],
    pub orientation: [f64; 4],
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            position: [0.0; 3],
            orientation: [0.0, 0.0, 0.0, 1.0],
        }
    }

    /// Pose from a position and ZYX Euler angles in degrees.
    pub fn from_euler(position: [f64; 3], yaw: f64, pitch: f64, roll: f64) -> Self {
        let q = UnitQuaternion::from_euler_angles(roll.to_radians(), pitch.to_radians(), yaw.to_radians());
        Self {
            position,
            orientation: [q.i, q.j, q.k, q.w],
        }
    }

    fn rotation(&self, tol: f64) -> Result<UnitQuaternion<f64>, LocError> {
        let [x, y, z, w] = self.orientation;
        let q = Quaternion::new(w, x, y, z);
        let norm = q.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > tol {
            return Err(LocError::NonUnitQuaternion { norm, tol });
        }
        Ok(UnitQuaternion::new_normalize(q))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosedImage {
    pub path: String,
    pub timestamp: f64,
    pub pose: Pose,
}

/// Translation distance and relative ZYX Euler angles `[yaw, pitch, roll]` in degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseDelta {
    pub distance: f64,
    pub euler: [f64; 3],
}

impl PoseDelta {
    pub fn max_abs_angle(&self) -> f64 {
        self.euler.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Wraps degrees into `(-180, 180]`.
pub fn wrap_degrees(a: f64) -> f64 {
    let r = a.rem_euclid(360.0);
    if r > 180.0 {
        r - 360.0
    } else {
        r
    }
}

/// Distance between positions and the Euler decomposition of `a^-1 * b`.
pub fn pose_delta(a: &Pose, b: &Pose) -> Result<PoseDelta, LocError> {
    let qa = a.rotation(UNIT_TOLERANCE)?;
    let qb = b.rotation(UNIT_TOLERANCE)?;
    let distance = (Vector3::from(a.position) - Vector3::from(b.position)).norm();
    let (roll, pitch, yaw) = (qa.inverse() * qb).euler_angles();
    Ok(PoseDelta {
        distance,
        euler: [yaw, pitch, roll].map(|r| wrap_degrees(r.to_degrees())),
    })
}

/// One trajectory sample: the timestamp token as written, its value and the pose.
#[derive(Clone, Debug, PartialEq)]
pub struct TumRecord {
    pub stamp: String,
    pub timestamp: f64,
    pub pose: Pose,
}

/// Parses `timestamp tx ty tz qx qy qz qw` lines; blank lines and `#` comments are skipped.
pub fn parse_tum(text: &str) -> Result<Vec<TumRecord>, LocError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| LocError::Parse { line: n + 1, reason };
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", toks.len())));
        }
        let mut v = [0.0f64; 8];
        for (slot, tok) in v.iter_mut().zip(&toks) {
            *slot = tok
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| err(format!("invalid number {tok:?}")))?;
        }
        let raw_pose = Pose {
            position: [v[1], v[2], v[3]],
            orientation: [v[4], v[5], v[6], v[7]],
        };
        let q = raw_pose.rotation(PARSE_TOLERANCE).map_err(|e| err(e.to_string()))?;
        out.push(TumRecord {
            stamp: toks[0].to_string(),
            timestamp: v[0],
            pose: Pose {
                position: raw_pose.position,
                orientation: [q.i, q.j, q.k, q.w],
            },
        });
    }
    Ok(out)
}

pub fn load_tum(path: &Path) -> Result<Vec<TumRecord>, LocError> {
    parse_tum(&std::fs::read_to_string(path).map_err(|e| io_err(path, e))?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Location {
    /// Dense per-scene id.
    pub id: usize,
    pub scene: String,
    /// Pose of the first member, when known.
    pub founding: Option<Pose>,
    /// Indices into [`LocationSet::images`].
    pub members: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEntry {
    pub path: String,
    /// Index into [`LocationSet::locations`].
    pub location: usize,
}

/// Images grouped into locations, scenes in lexical order, ids dense per scene.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LocationSet {
    pub images: Vec<ImageEntry>,
    pub locations: Vec<Location>,
}

/// Per-scene totals.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneSummary {
    pub scene: String,
    pub locations: usize,
    pub images: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidationReport {
    pub scenes: Vec<SceneSummary>,
    pub total_locations: usize,
    pub total_images: usize,
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "scene\tlocations\timages")?;
        for s in &self.scenes {
            writeln!(f, "{}\t{}\t{}", s.scene, s.locations, s.images)?;
        }
        write!(f, "total\t{}\t{}", self.total_locations, self.total_images)
    }
}

impl LocationSet {
    pub fn num_images(&self) -> usize {
        self.images.len()
    }

    pub fn num_locations(&self) -> usize {
        self.locations.len()
    }

    pub fn location_of(&self, image: usize) -> usize {
        self.images[image].location
    }

    /// Builds a set from `(path, scene, id)` rows, checking every invariant.
    pub fn from_entries<S: AsRef<str>>(rows: &[(S, S, usize)]) -> Result<Self, LocError> {
        if rows.is_empty() {
            return Err(LocError::EmptyManifest);
        }
        let mut seen = HashSet::new();
        let mut per_scene: BTreeMap<&str, BTreeMap<usize, Vec<usize>>> = BTreeMap::new();
        for (idx, (path, scene, id)) in rows.iter().enumerate() {
            if !seen.insert(path.as_ref()) {
                return Err(LocError::DuplicateImage(path.as_ref().to_string()));
            }
            per_scene.entry(scene.as_ref()).or_default().entry(*id).or_default().push(idx);
        }
        let mut set = LocationSet::default();
        let mut global = vec![0usize; rows.len()];
        for (scene, ids) in &per_scene {
            let count = ids.len();
            for (expect, (&id, members)) in ids.iter().enumerate() {
                if id != expect {
                    return Err(LocError::UnknownLocation {
                        scene: scene.to_string(),
                        id,
                        count,
                    });
                }
                for &m in members {
                    global[m] = set.locations.len();
                }
                set.locations.push(Location {
                    id,
                    scene: scene.to_string(),
                    founding: None,
                    members: members.clone(),
                });
            }
        }
        set.images = rows
            .iter()
            .zip(global)
            .map(|((path, _, _), location)| ImageEntry {
                path: path.as_ref().to_string(),
                location,
            })
            .collect();
        Ok(set)
    }

    pub fn validate(&self) -> Result<ValidationReport, LocError> {
        let rows: Vec<(&str, &str, usize)> = self
            .images
            .iter()
            .map(|e| {
                let l = &self.locations[e.location];
                (e.path.as_str(), l.scene.as_str(), l.id)
            })
            .collect();
        let rebuilt = Self::from_entries(&rows)?;
        let mut scenes: Vec<SceneSummary> = Vec::new();
        for l in &rebuilt.locations {
            match scenes.last_mut() {
                Some(s) if s.scene == l.scene => {
                    s.locations += 1;
                    s.images += l.members.len();
                }
                _ => scenes.push(SceneSummary {
                    scene: l.scene.clone(),
                    locations: 1,
                    images: l.members.len(),
                }),
            }
        }
        Ok(ValidationReport {
            total_locations: rebuilt.locations.len(),
            total_images: rebuilt.images.len(),
            scenes,
        })
    }

    /// Parses `<relative_path> <scene> <location_id>` lines. Paths may contain
    /// spaces; the last two fields are split off from the right.
    pub fn parse_manifest(text: &str) -> Result<Self, LocError> {
        let mut rows = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: &str| LocError::Parse {
                line: n + 1,
                reason: reason.to_string(),
            };
            let mut parts = line.rsplitn(3, char::is_whitespace);
            let id = parts.next().ok_or_else(|| err("missing location id"))?;
            let scene = parts.next().ok_or_else(|| err("missing scene"))?;
            let path = parts.next().map(str::trim_end).filter(|p| !p.is_empty()).ok_or_else(|| err("missing path"))?;
            let id: usize = id.parse().map_err(|_| err("location id must be a non-negative integer"))?;
            if scene.is_empty() {
                return Err(err("missing scene"));
            }
            rows.push((path.to_string(), scene.to_string(), id));
        }
        Self::from_entries(&rows)
    }

    pub fn load_manifest(path: &Path) -> Result<Self, LocError> {
        Self::parse_manifest(&std::fs::read_to_string(path).map_err(|e| io_err(path, e))?)
    }

    /// Manifest text, one image per line, grouped by scene and location.
    pub fn to_manifest(&self) -> String {
        let mut s = String::from("# path scene location_id\n");
        for l in &self.locations {
            for &m in &l.members {
                let _ = writeln!(s, "{} {} {}", self.images[m].path, l.scene, l.id);
            }
        }
        s
    }
}

/// Thresholds of the incremental location rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocationThresholds {
    pub dist: f64,
    pub angle: f64,
}

impl Default for LocationThresholds {
    fn default() -> Self {
        Self {
            dist: DEFAULT_DIST_THRESH,
            angle: DEFAULT_ANGLE_THRESH,
        }
    }
}

fn passes(d: &PoseDelta, t: &LocationThresholds) -> bool {
    d.distance < t.dist && d.max_abs_angle() < t.angle
}

/// Incremental clustering in sequence order. Each image is compared with the
/// founding pose of every existing location; among locations passing both the
/// distance and the orientation gate it joins the nearest by distance (lowest
/// id on ties). When none passes it founds a new location.
pub fn extract_locations(
    sequence: &[PosedImage],
    scene: &str,
    thresholds: LocationThresholds,
) -> Result<LocationSet, LocError> {
    if sequence.is_empty() {
        return Err(LocError::EmptySequence);
    }
    if !(thresholds.dist > 0.0 && thresholds.angle > 0.0) {
        return Err(LocError::BadThreshold {
            dist: thresholds.dist,
            angle: thresholds.angle,
        });
    }
    let mut set = LocationSet::default();
    for (idx, img) in sequence.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (lid, loc) in set.locations.iter().enumerate() {
            let founding = loc.founding.as_ref().expect("extracted locations carry a founding pose");
            let d = pose_delta(founding, &img.pose)?;
            if passes(&d, &thresholds) && best.is_none_or(|(_, bd)| d.distance < bd) {
                best = Some((lid, d.distance));
            }
        }
        // validates the quaternion even for the first image
        pose_delta(&img.pose, &img.pose)?;
        let lid = match best {
            Some((lid, _)) => lid,
            None => {
                set.locations.push(Location {
                    id: set.locations.len(),
                    scene: scene.to_string(),
                    founding: Some(img.pose),
                    members: Vec::new(),
                });
                set.locations.len() - 1
            }
        };
        set.locations[lid].members.push(idx);
        set.images.push(ImageEntry {
            path: img.path.clone(),
            location: lid,
        });
    }
    Ok(set)
}

/// Relative image path under the dataset directory convention.
pub fn dataset_path(scene: &str, location: usize, image: &str) -> String {
    format!("{scene}/location_{location}/{image}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(x: f64, yaw: f64, name: &str) -> PosedImage {
        PosedImage {
            path: name.into(),
            timestamp: 0.0,
            pose: Pose::from_euler([x, 0.0, 0.0], yaw, 0.0, 0.0),
        }
    }

    #[test]
    fn identity_and_translation() {
        let a = Pose::identity();
        let d = pose_delta(&a, &a).unwrap();
        assert_eq!(d.distance, 0.0);
        assert_eq!(d.euler, [0.0, 0.0, 0.0]);
        let mut b = a;
        b.position[0] = 2.0;
        let d = pose_delta(&a, &b).unwrap();
        assert_eq!(d.distance, 2.0);
        assert_eq!(d.euler, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn yaw_quarter_turn() {
        // Rz(90): quaternion (0, 0, sin 45, cos 45); ZYX yaw = atan2(r10, r00) = atan2(1, 0)
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let b = Pose {
            position: [0.0; 3],
            orientation: [0.0, 0.0, h, h],
        };
        let d = pose_delta(&Pose::identity(), &b).unwrap();
        assert!((d.euler[0] - 90.0).abs() < 1e-9);
        assert!(d.euler[1].abs() < 1e-9 && d.euler[2].abs() < 1e-9);
    }

    #[test]
    fn non_unit_quaternion_rejected() {
        let b = Pose {
            position: [0.0; 3],
            orientation: [0.0, 0.0, 0.0, 1.01],
        };
        assert!(matches!(pose_delta(&Pose::identity(), &b), Err(LocError::NonUnitQuaternion { .. })));
    }

    #[test]
    fn wrapping() {
        assert_eq!(wrap_degrees(180.0), 180.0);
        assert_eq!(wrap_degrees(-180.0), 180.0);
        assert_eq!(wrap_degrees(190.0), -170.0);
        assert_eq!(wrap_degrees(-10.0), -10.0);
    }

    #[test]
    fn line_example() {
        let seq = [at(0.0, 0.0, "a"), at(0.4, 0.0, "b"), at(2.5, 0.0, "c")];
        let set = extract_locations(&seq, "s", LocationThresholds::default()).unwrap();
        assert_eq!(set.num_locations(), 2);
        assert_eq!(set.locations[0].members, vec![0, 1]);
        assert_eq!(set.locations[1].members, vec![2]);
        let one = extract_locations(&seq[..1], "s", LocationThresholds::default()).unwrap();
        assert_eq!(one.num_locations(), 1);
    }

    #[test]
    fn orientation_gate() {
        let seq = [at(0.0, 0.0, "a"), at(0.4, 90.0, "b")];
        let set = extract_locations(&seq, "s", LocationThresholds { dist: 1.0, angle: 30.0 }).unwrap();
        assert_eq!(set.num_locations(), 2);
        assert!(matches!(
            extract_locations(&[], "s", LocationThresholds::default()),
            Err(LocError::EmptySequence)
        ));
    }

    #[test]
    fn tum_parsing() {
        let text = "# comment\n1.5 0 0 0 0 0 0 1\n\n2.0 1 2 3 0 0 0.70710 0.70710\n";
        let recs = parse_tum(text).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].stamp, "1.5");
        assert_eq!(recs[1].pose.position, [1.0, 2.0, 3.0]);
        let q = recs[1].pose.orientation;
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        assert!(matches!(parse_tum("1 2 3"), Err(LocError::Parse { line: 1, .. })));
        assert!(parse_tum("1 0 0 0 0 0 0 2").is_err());
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let text = "# header\nhome/location_0/a b.png home 0\nhome/x.png home 1\noffice/y.png office 0\n";
        let set = LocationSet::parse_manifest(text).unwrap();
        assert_eq!(set.images[0].path, "home/location_0/a b.png");
        let report = set.validate().unwrap();
        assert_eq!(report.total_locations, 3);
        assert_eq!(report.total_images, 3);
        let again = LocationSet::parse_manifest(&set.to_manifest()).unwrap();
        assert_eq!(again.validate().unwrap(), report);

        let dup = "a.png s 0\na.png s 0\n";
        match LocationSet::parse_manifest(dup) {
            Err(LocError::DuplicateImage(p)) => assert_eq!(p, "a.png"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(LocationSet::parse_manifest("# only\n\n"), Err(LocError::EmptyManifest)));
        assert!(matches!(
            LocationSet::parse_manifest("a.png s 0\nb.png s 2\n"),
            Err(LocError::UnknownLocation { id: 2, .. })
        ));
        assert!(LocationSet::parse_manifest("a.png s x\n").is_err());
    }
}
