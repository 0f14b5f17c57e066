//! Floor-plan geometry: walls, physical and virtual anchors, specular
//! visibility and the body-shadowing field-of-view gate.
//!
//! Virtual anchors are mirror images of a physical anchor across the
//! supporting lines of the walls. A specular arrival through a sequence of
//! walls behaves like a direct path from the corresponding virtual anchor, so
//! its path length is simply the Euclidean distance to that image.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Point2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point = Point2<f64>;

/// Walls shorter than this are treated as degenerate.
const MIN_WALL_LENGTH: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("wall `{0}` has zero length")]
    DegenerateWall(String),
    #[error("duplicate wall id `{0}`")]
    DuplicateWall(String),
    #[error("anchor `{0}` coincides with the agent position")]
    CoincidentAnchor(String),
    #[error("anchor `{0}` is not a physical anchor")]
    NotPhysical(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WallId(pub String);

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnchorId(pub String);

impl fmt::Display for WallId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for AnchorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AnchorId {
    fn from(s: &str) -> Self {
        AnchorId(s.to_owned())
    }
}

impl From<&str> for WallId {
    fn from(s: &str) -> Self {
        WallId(s.to_owned())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Wall {
    pub id: WallId,
    pub start: Point,
    pub end: Point,
}

impl Wall {
    pub fn new(id: impl Into<String>, start: Point, end: Point) -> Result<Self, GeometryError> {
        let id = WallId(id.into());
        if (end - start).norm() < MIN_WALL_LENGTH {
            return Err(GeometryError::DegenerateWall(id.0));
        }
        Ok(Self { id, start, end })
    }

    pub fn length(&self) -> f64 {
        (self.end - self.start).norm()
    }
}

/// A set of walls with unique identifiers and positive lengths.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FloorPlan {
    walls: Vec<Wall>,
}

impl FloorPlan {
    pub fn new(walls: Vec<Wall>) -> Result<Self, GeometryError> {
        for (i, w) in walls.iter().enumerate() {
            if w.length() < MIN_WALL_LENGTH {
                return Err(GeometryError::DegenerateWall(w.id.0.clone()));
            }
            if walls[..i].iter().any(|o| o.id == w.id) {
                return Err(GeometryError::DuplicateWall(w.id.0.clone()));
            }
        }
        Ok(Self { walls })
    }

    /// Axis-aligned rectangular room `[x0, x1] × [y0, y1]` with walls named
    /// `south`, `east`, `north`, `west`.
    pub fn rectangle(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, GeometryError> {
        let (a, b, c, d) = (
            Point::new(x0, y0),
            Point::new(x1, y0),
            Point::new(x1, y1),
            Point::new(x0, y1),
        );
        Self::new(vec![
            Wall::new("south", a, b)?,
            Wall::new("east", b, c)?,
            Wall::new("north", c, d)?,
            Wall::new("west", d, a)?,
        ])
    }

    pub fn walls(&self) -> &[Wall] {
        &self.walls
    }

    pub fn wall(&self, id: &WallId) -> Option<&Wall> {
        self.walls.iter().find(|w| &w.id == id)
    }

    fn wall_index(&self, id: &WallId) -> Option<usize> {
        self.walls.iter().position(|w| &w.id == id)
    }

    pub fn is_empty(&self) -> bool {
        self.walls.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorKind {
    Physical,
    Virtual,
}

/// A physical anchor or one of its mirror images.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub id: AnchorId,
    pub position: Point,
    pub kind: AnchorKind,
    pub parent_pa: AnchorId,
    /// Walls in the order the mirroring was applied, starting at the PA.
    pub wall_sequence: Vec<WallId>,
}

impl Anchor {
    pub fn physical(id: impl Into<String>, position: Point) -> Self {
        let id = AnchorId(id.into());
        Self {
            parent_pa: id.clone(),
            id,
            position,
            kind: AnchorKind::Physical,
            wall_sequence: Vec::new(),
        }
    }

    pub fn order(&self) -> usize {
        self.wall_sequence.len()
    }

    pub fn is_physical(&self) -> bool {
        self.kind == AnchorKind::Physical
    }
}

/// Agent position, heading (radians from +x, normalized to (−π, π]) and velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentPose {
    pub position: Point,
    orientation: f64,
    pub velocity: Vector2<f64>,
}

impl AgentPose {
    pub fn new(position: Point, orientation: f64, velocity: Vector2<f64>) -> Self {
        Self {
            position,
            orientation: normalize_angle(orientation),
            velocity,
        }
    }

    pub fn orientation(&self) -> f64 {
        self.orientation
    }
}

/// Wraps an angle into (−π, π].
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Angular sector centred on the agent heading; directions outside the sector
/// are shadowed by the body.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FovConfig {
    half_angle: f64,
    pub enabled: bool,
}

impl FovConfig {
    /// Returns `None` unless `half_angle` lies in (0, π].
    pub fn new(half_angle: f64, enabled: bool) -> Option<Self> {
        (half_angle > 0.0 && half_angle <= PI).then_some(Self {
            half_angle,
            enabled,
        })
    }

    pub fn disabled() -> Self {
        Self {
            half_angle: PI,
            enabled: false,
        }
    }

    pub fn half_angle(&self) -> f64 {
        self.half_angle
    }
}

impl Default for FovConfig {
    fn default() -> Self {
        Self {
            half_angle: PI / 2.0,
            enabled: true,
        }
    }
}

/// Reflects `p` across the infinite line through `wall`.
pub fn mirror_point(p: &Point, wall: &Wall) -> Result<Point, GeometryError> {
    let d = wall.end - wall.start;
    let len2 = d.norm_squared();
    if len2.sqrt() < MIN_WALL_LENGTH {
        return Err(GeometryError::DegenerateWall(wall.id.0.clone()));
    }
    let v = p - wall.start;
    let foot = wall.start + d * (v.dot(&d) / len2);
    Ok(foot + (foot - p))
}

/// All virtual anchors of orders `1..=max_order` for one physical anchor.
///
/// Sequences never repeat the same wall twice in a row. The output is sorted
/// by order, then lexicographically by the wall indices of the sequence.
pub fn generate_vas(
    plan: &FloorPlan,
    pa: &Anchor,
    max_order: usize,
) -> Result<Vec<Anchor>, GeometryError> {
    if !pa.is_physical() {
        return Err(GeometryError::NotPhysical(pa.id.0.clone()));
    }
    let mut out = Vec::new();
    // (wall index sequence, image position) of the previous order
    let mut frontier: Vec<(Vec<usize>, Point)> = vec![(Vec::new(), pa.position)];
    for _ in 0..max_order {
        let mut next = Vec::with_capacity(frontier.len() * plan.walls.len());
        for (seq, pos) in &frontier {
            for (wi, wall) in plan.walls.iter().enumerate() {
                if seq.last() == Some(&wi) {
                    continue;
                }
                let mut s = seq.clone();
                s.push(wi);
                next.push((s, mirror_point(pos, wall)?));
            }
        }
        // frontier entries are already in lexicographic order by construction
        for (seq, pos) in &next {
            let walls: Vec<WallId> = seq.iter().map(|&i| plan.walls[i].id.clone()).collect();
            let label = walls
                .iter()
                .map(|w| w.0.as_str())
                .collect::<Vec<_>>()
                .join("+");
            out.push(Anchor {
                id: AnchorId(format!("{}:{}", pa.id, label)),
                position: *pos,
                kind: AnchorKind::Virtual,
                parent_pa: pa.id.clone(),
                wall_sequence: walls,
            });
        }
        frontier = next;
    }
    Ok(out)
}

/// Line-of-sight distance between the agent and an (image) anchor.
pub fn expected_distance(agent: &Point, anchor: &Anchor) -> f64 {
    (agent - anchor.position).norm()
}

/// Intersection of segment `a→b` with the wall's supporting line, returned as
/// `(t along a→b, u along the wall)`, or `None` when parallel.
fn segment_line_hit(a: &Point, b: &Point, wall: &Wall) -> Option<(f64, f64)> {
    let r = b - a;
    let s = wall.end - wall.start;
    let denom = r.x * s.y - r.y * s.x;
    if denom.abs() < 1e-15 * r.norm() * s.norm() {
        return None;
    }
    let q = wall.start - a;
    let t = (q.x * s.y - q.y * s.x) / denom;
    let u = (q.x * r.y - q.y * r.x) / denom;
    Some((t, u))
}

/// Reflection points of the specular path agent → … → PA, ordered from the
/// agent side, or `None` if any reflection falls outside its wall segment.
pub fn reflection_points(agent: &Point, anchor: &Anchor, plan: &FloorPlan) -> Option<Vec<Point>> {
    if anchor.is_physical() {
        return Some(Vec::new());
    }
    let walls: Vec<&Wall> = anchor
        .wall_sequence
        .iter()
        .map(|id| plan.wall_index(id).map(|i| &plan.walls[i]))
        .collect::<Option<_>>()?;
    // images[k] is the source mirrored across the first k walls
    let mut images = Vec::with_capacity(walls.len() + 1);
    let mut pos = anchor.position;
    images.push(pos);
    for w in walls.iter().rev() {
        pos = mirror_point(&pos, w).ok()?;
        images.push(pos);
    }
    images.reverse();

    let mut points = Vec::with_capacity(walls.len());
    let mut from = *agent;
    for k in (0..walls.len()).rev() {
        let target = images[k + 1];
        let (t, u) = segment_line_hit(&from, &target, walls[k])?;
        if !(t > 0.0 && t < 1.0 && u > 0.0 && u < 1.0) {
            return None;
        }
        from += (target - from) * t;
        points.push(from);
    }
    Some(points)
}

/// True when every reflection point of the unfolded path lies strictly inside
/// its wall segment. Blockage by other walls is not considered.
pub fn specular_visible(agent: &Point, anchor: &Anchor, plan: &FloorPlan) -> bool {
    reflection_points(agent, anchor, plan).is_some()
}

/// Body-shadowing gate. Boundary directions count as visible.
pub fn in_fov(pose: &AgentPose, anchor_pos: &Point, fov: &FovConfig) -> Result<bool, GeometryError> {
    if !fov.enabled {
        return Ok(true);
    }
    let d = anchor_pos - pose.position;
    if d.norm() < 1e-12 {
        return Err(GeometryError::CoincidentAnchor(format!(
            "({}, {})",
            anchor_pos.x, anchor_pos.y
        )));
    }
    let (s, c) = pose.orientation.sin_cos();
    let dot = c * d.x + s * d.y;
    let cross = c * d.y - s * d.x;
    Ok(cross.atan2(dot).abs() <= fov.half_angle + 1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pt(x: f64, y: f64) -> Point {
        Point::new(x, y)
    }

    fn wall(x0: f64, y0: f64, x1: f64, y1: f64) -> Wall {
        Wall::new("w", pt(x0, y0), pt(x1, y1)).unwrap()
    }

    #[test]
    fn mirror_examples() {
        let w = wall(0.0, 0.0, 5.0, 0.0);
        assert_abs_diff_eq!(mirror_point(&pt(1.0, 2.0), &w).unwrap(), pt(1.0, -2.0));
        assert_abs_diff_eq!(mirror_point(&pt(3.0, 0.0), &w).unwrap(), pt(3.0, 0.0));
        let v = wall(0.0, 0.0, 0.0, 1.0);
        let twice = mirror_point(&mirror_point(&pt(1.0, 2.0), &w).unwrap(), &v).unwrap();
        assert_abs_diff_eq!(twice, pt(-1.0, -2.0), epsilon = 1e-12);
    }

    #[test]
    fn degenerate_wall_rejected() {
        assert_eq!(
            Wall::new("z", pt(1.0, 1.0), pt(1.0, 1.0)),
            Err(GeometryError::DegenerateWall("z".into()))
        );
        let bad = Wall {
            id: "z".into(),
            start: pt(1.0, 1.0),
            end: pt(1.0, 1.0),
        };
        assert!(mirror_point(&pt(0.0, 0.0), &bad).is_err());
        assert!(FloorPlan::new(vec![bad]).is_err());
    }

    #[test]
    fn duplicate_wall_ids_rejected() {
        let plan = FloorPlan::new(vec![wall(0.0, 0.0, 1.0, 0.0), wall(0.0, 1.0, 1.0, 1.0)]);
        assert_eq!(plan, Err(GeometryError::DuplicateWall("w".into())));
    }

    #[test]
    fn first_order_vas_of_rectangle() {
        let plan = FloorPlan::rectangle(0.0, 0.0, 5.0, 4.0).unwrap();
        let pa = Anchor::physical("pa", pt(1.0, 2.0));
        let vas = generate_vas(&plan, &pa, 1).unwrap();
        let got: Vec<Point> = vas.iter().map(|a| a.position).collect();
        let want = [pt(1.0, -2.0), pt(9.0, 2.0), pt(1.0, 6.0), pt(-1.0, 2.0)];
        assert_eq!(got.len(), 4);
        for (g, w) in got.iter().zip(want.iter()) {
            assert_abs_diff_eq!(*g, *w, epsilon = 1e-12);
        }
        for va in &vas {
            assert_eq!(va.order(), 1);
            assert_eq!(va.parent_pa, pa.id);
            assert_eq!(va.kind, AnchorKind::Virtual);
        }
    }

    #[test]
    fn second_order_count_and_positions() {
        let plan = FloorPlan::rectangle(0.0, 0.0, 5.0, 4.0).unwrap();
        let pa = Anchor::physical("pa", pt(1.0, 2.0));
        let vas = generate_vas(&plan, &pa, 2).unwrap();
        assert_eq!(vas.len(), 4 + 12);
        // oracle: mirror twice along every non-repeating wall pair
        let walls = plan.walls();
        let mut k = 4;
        for (i, wi) in walls.iter().enumerate() {
            for (j, wj) in walls.iter().enumerate() {
                if i == j {
                    continue;
                }
                let p = mirror_point(&mirror_point(&pa.position, wi).unwrap(), wj).unwrap();
                assert_abs_diff_eq!(vas[k].position, p, epsilon = 1e-12);
                assert_eq!(vas[k].wall_sequence, vec![wi.id.clone(), wj.id.clone()]);
                k += 1;
            }
        }
        for va in &vas {
            assert!(va.wall_sequence.windows(2).all(|w| w[0] != w[1]));
        }
    }

    #[test]
    fn empty_plan_has_no_vas() {
        let pa = Anchor::physical("pa", pt(1.0, 2.0));
        assert!(generate_vas(&FloorPlan::default(), &pa, 3).unwrap().is_empty());
    }

    #[test]
    fn vas_require_physical_parent() {
        let plan = FloorPlan::rectangle(0.0, 0.0, 5.0, 4.0).unwrap();
        let pa = Anchor::physical("pa", pt(1.0, 2.0));
        let va = generate_vas(&plan, &pa, 1).unwrap().remove(0);
        assert!(generate_vas(&plan, &va, 1).is_err());
    }

    #[test]
    fn distances() {
        let pa = Anchor::physical("pa", pt(1.0, 2.0));
        assert_abs_diff_eq!(expected_distance(&pt(4.0, 2.0), &pa), 3.0);
        assert_eq!(expected_distance(&pt(1.0, 2.0), &pa), 0.0);
        let plan = FloorPlan::new(vec![Wall::new("floor", pt(0.0, 0.0), pt(5.0, 0.0)).unwrap()]).unwrap();
        let va = generate_vas(&plan, &pa, 1).unwrap().remove(0);
        let agent = pt(4.0, 2.0);
        assert_abs_diff_eq!(expected_distance(&agent, &va), 5.0, epsilon = 1e-12);
        // unfolded path PA → reflection → agent
        let r = reflection_points(&agent, &va, &plan).unwrap()[0];
        assert_abs_diff_eq!(r, pt(2.5, 0.0), epsilon = 1e-12);
        let folded = (r - pa.position).norm() + (agent - r).norm();
        assert_abs_diff_eq!(folded, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn visibility() {
        let pa = Anchor::physical("pa", pt(1.0, 2.0));
        let agent = pt(4.0, 2.0);
        let long = FloorPlan::new(vec![Wall::new("floor", pt(0.0, 0.0), pt(5.0, 0.0)).unwrap()]).unwrap();
        let va = generate_vas(&long, &pa, 1).unwrap().remove(0);
        assert!(specular_visible(&agent, &va, &long));
        let short = FloorPlan::new(vec![Wall::new("floor", pt(0.0, 0.0), pt(1.0, 0.0)).unwrap()]).unwrap();
        let va = generate_vas(&short, &pa, 1).unwrap().remove(0);
        assert!(!specular_visible(&agent, &va, &short));
        assert!(specular_visible(&agent, &pa, &short));
    }

    #[test]
    fn second_order_visibility_in_rectangle() {
        let plan = FloorPlan::rectangle(0.0, 0.0, 5.0, 4.0).unwrap();
        let pa = Anchor::physical("pa", pt(1.0, 2.0));
        let agent = pt(3.5, 1.0);
        for va in generate_vas(&plan, &pa, 2).unwrap() {
            if let Some(points) = reflection_points(&agent, &va, &plan) {
                // folded length equals image distance
                let mut len = 0.0;
                let mut prev = agent;
                for p in &points {
                    len += (p - prev).norm();
                    prev = *p;
                }
                len += (pa.position - prev).norm();
                assert_abs_diff_eq!(len, expected_distance(&agent, &va), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn fov_examples() {
        let fov = FovConfig::new(PI / 2.0, true).unwrap();
        let pose = AgentPose::new(pt(0.0, 0.0), 0.0, Vector2::zeros());
        assert!(in_fov(&pose, &pt(1.0, 0.0), &fov).unwrap());
        assert!(!in_fov(&pose, &pt(-1.0, 0.0), &fov).unwrap());
        assert!(in_fov(&pose, &pt(0.0, 1.0), &fov).unwrap());
        assert!(in_fov(&pose, &pt(0.0, 0.0), &fov).is_err());
        assert!(in_fov(&pose, &pt(-1.0, 0.0), &FovConfig::disabled()).unwrap());
    }

    #[test]
    fn fov_half_angle_range() {
        assert!(FovConfig::new(0.0, true).is_none());
        assert!(FovConfig::new(PI + 1e-9, true).is_none());
        assert!(FovConfig::new(PI, true).is_some());
    }

    #[test]
    fn orientation_is_normalized() {
        let p = AgentPose::new(pt(0.0, 0.0), 3.0 * PI, Vector2::zeros());
        assert_abs_diff_eq!(p.orientation(), PI, epsilon = 1e-12);
        let p = AgentPose::new(pt(0.0, 0.0), -PI, Vector2::zeros());
        assert_abs_diff_eq!(p.orientation(), PI, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn mirror_is_involution(
            px in -50.0..50.0f64, py in -50.0..50.0f64,
            ax in -20.0..20.0f64, ay in -20.0..20.0f64,
            ang in 0.0..(2.0 * PI), len in 0.1..10.0f64,
        ) {
            let w = Wall::new("w", pt(ax, ay), pt(ax + len * ang.cos(), ay + len * ang.sin())).unwrap();
            let p = pt(px, py);
            let back = mirror_point(&mirror_point(&p, &w).unwrap(), &w).unwrap();
            prop_assert!((back - p).norm() < 1e-9);
        }

        #[test]
        fn full_half_angle_sees_everything(
            h in -PI..PI, ax in -10.0..10.0f64, ay in -10.0..10.0f64,
        ) {
            prop_assume!(ax.hypot(ay) > 1e-6);
            let fov = FovConfig::new(PI, true).unwrap();
            let pose = AgentPose::new(pt(0.0, 0.0), h, Vector2::zeros());
            prop_assert!(in_fov(&pose, &pt(ax, ay), &fov).unwrap());
        }

        #[test]
        fn fov_is_rotation_invariant(
            h in -PI..PI, rot in -PI..PI, half in 0.1..PI,
            px in -5.0..5.0f64, py in -5.0..5.0f64,
            ax in -10.0..10.0f64, ay in -10.0..10.0f64,
        ) {
            let d = Vector2::new(ax - px, ay - py);
            prop_assume!(d.norm() > 1e-3);
            let rel = normalize_angle(d.y.atan2(d.x) - h).abs();
            prop_assume!((rel - half).abs() > 1e-9);
            let fov = FovConfig::new(half, true).unwrap();
            let a = in_fov(&AgentPose::new(pt(px, py), h, Vector2::zeros()), &pt(ax, ay), &fov).unwrap();
            let r = nalgebra::Rotation2::new(rot);
            let b = in_fov(
                &AgentPose::new(r * pt(px, py), h + rot, Vector2::zeros()),
                &(r * pt(ax, ay)),
                &fov,
            ).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
