//! Closed race tracks: a polyline centerline with a uniform half-width.
//!
//! Conventions used everywhere in the crate:
//! - `s` is arc length along the centerline, increasing in the driving
//!   direction (waypoint order) and wrapping modulo the track length.
//! - `d` is the signed lateral offset, positive to the left of travel.
//! - The corridor edges are the centerline offset by `±half_width` with mitered
//!   joints, so each edge segment is parallel to its centerline segment.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geometry::{ray_segment, segments_intersect, wrap_angle, Vec2};
use crate::{Error, Result};

/// Minimum number of waypoints accepted by the loader.
pub const MIN_WAYPOINTS: usize = 3;

/// On-disk track representation. The polyline is implicitly closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackFile {
    pub name: String,
    pub width_m: f64,
    pub waypoints: Vec<[f64; 2]>,
}

/// Position of a point relative to the centerline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackFrame {
    /// Arc length of the nearest centerline point, in `[0, total_length)`.
    pub s: f64,
    /// Signed lateral offset, left positive.
    pub d: f64,
    /// Heading of the centerline segment at `s`.
    pub psi_ref: f64,
}

#[derive(Debug, Clone)]
pub struct TrackGeometry {
    name: String,
    half_width: f64,
    waypoints: Vec<Vec2>,
    /// `cum_s[i]` is the arc length at waypoint `i`; `cum_s[n]` is the total length.
    cum_s: Vec<f64>,
    seg_dir: Vec<Vec2>,
    seg_len: Vec<f64>,
    /// Unit bisector normal at each waypoint (left side).
    vertex_normal: Vec<Vec2>,
    vertex_heading: Vec<f64>,
    left_edge: Vec<Vec2>,
    right_edge: Vec<Vec2>,
    center_grid: SegmentGrid,
    edge_grid: SegmentGrid,
}

impl PartialEq for TrackGeometry {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.half_width == other.half_width
            && self.waypoints == other.waypoints
    }
}

impl TrackGeometry {
    pub fn new(name: impl Into<String>, waypoints: Vec<Vec2>, half_width: f64) -> Result<Self> {
        let name = name.into();
        let n = waypoints.len();
        if n < MIN_WAYPOINTS {
            return Err(Error::InvalidTrack(format!(
                "{n} waypoints, need at least {MIN_WAYPOINTS}"
            )));
        }
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(Error::InvalidTrack(format!(
                "half width must be positive, got {half_width}"
            )));
        }
        if let Some(i) = waypoints.iter().position(|p| !p.is_finite()) {
            return Err(Error::InvalidTrack(format!("waypoint {i} is not finite")));
        }
        let mut seg_dir = Vec::with_capacity(n);
        let mut seg_len = Vec::with_capacity(n);
        let mut cum_s = Vec::with_capacity(n + 1);
        cum_s.push(0.0);
        for i in 0..n {
            let a = waypoints[i];
            let b = waypoints[(i + 1) % n];
            let len = a.distance(b);
            if len == 0.0 {
                let what = if i + 1 == n {
                    "last waypoint coincides with the first (the polyline is closed implicitly)".to_string()
                } else {
                    format!("waypoints {i} and {} coincide", i + 1)
                };
                return Err(Error::InvalidTrack(what));
            }
            seg_dir.push((b - a) * (1.0 / len));
            seg_len.push(len);
            cum_s.push(cum_s[i] + len);
        }
        let total = cum_s[n];
        if !(total > 0.0) {
            return Err(Error::InvalidTrack("zero total length".into()));
        }

        let mut vertex_normal = Vec::with_capacity(n);
        let mut vertex_heading = Vec::with_capacity(n);
        let mut left_edge = Vec::with_capacity(n);
        let mut right_edge = Vec::with_capacity(n);
        for i in 0..n {
            let incoming = seg_dir[(i + n - 1) % n];
            let outgoing = seg_dir[i];
            if incoming.dot(outgoing) <= -0.5 {
                return Err(Error::InvalidTrack(format!(
                    "centerline turns by more than 120 degrees at waypoint {i}"
                )));
            }
            let bisector = (incoming.perp() + outgoing.perp()).normalized();
            // Miter length keeps each edge segment exactly `half_width` from its centerline segment.
            let miter = half_width / bisector.dot(incoming.perp());
            vertex_normal.push(bisector);
            vertex_heading.push((incoming + outgoing).angle());
            left_edge.push(waypoints[i] + bisector * miter);
            right_edge.push(waypoints[i] - bisector * miter);
        }

        let center_segments: Vec<(Vec2, Vec2)> =
            (0..n).map(|i| (waypoints[i], waypoints[(i + 1) % n])).collect();
        let center_grid = SegmentGrid::build(&center_segments, (half_width * 2.0).max(4.0));
        check_simple(&center_segments, &center_grid)?;

        let mut edge_segments = Vec::with_capacity(2 * n);
        for i in 0..n {
            edge_segments.push((left_edge[i], left_edge[(i + 1) % n]));
        }
        for i in 0..n {
            edge_segments.push((right_edge[i], right_edge[(i + 1) % n]));
        }
        let edge_grid = SegmentGrid::build(&edge_segments, (half_width * 2.0).max(4.0));

        Ok(TrackGeometry {
            name,
            half_width,
            waypoints,
            cum_s,
            seg_dir,
            seg_len,
            vertex_normal,
            vertex_heading,
            left_edge,
            right_edge,
            center_grid,
            edge_grid,
        })
    }

    pub fn from_file_data(file: TrackFile) -> Result<Self> {
        let waypoints = file.waypoints.iter().map(|p| Vec2::new(p[0], p[1])).collect();
        TrackGeometry::new(file.name, waypoints, file.width_m / 2.0)
    }

    pub fn to_file_data(&self) -> TrackFile {
        TrackFile {
            name: self.name.clone(),
            width_m: self.half_width * 2.0,
            waypoints: self.waypoints.iter().map(|p| [p.x, p.y]).collect(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn waypoints(&self) -> &[Vec2] {
        &self.waypoints
    }

    pub fn total_length(&self) -> f64 {
        self.cum_s[self.waypoints.len()]
    }

    pub fn left_edge(&self) -> &[Vec2] {
        &self.left_edge
    }

    pub fn right_edge(&self) -> &[Vec2] {
        &self.right_edge
    }

    /// Wraps an arc length into `[0, total_length)`.
    pub fn wrap_s(&self, s: f64) -> f64 {
        let total = self.total_length();
        let w = s.rem_euclid(total);
        if w >= total {
            0.0
        } else {
            w
        }
    }

    fn segment_at(&self, s: f64) -> (usize, f64) {
        let s = self.wrap_s(s);
        // cum_s is sorted; find the last index with cum_s[i] <= s.
        let i = match self.cum_s.binary_search_by(|v| v.total_cmp(&s)) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        let i = i.min(self.waypoints.len() - 1);
        (i, s - self.cum_s[i])
    }

    pub fn point_at(&self, s: f64) -> Vec2 {
        let (i, along) = self.segment_at(s);
        self.waypoints[i] + self.seg_dir[i] * along
    }

    /// Left unit normal of the centerline segment containing `s`.
    pub fn normal_at(&self, s: f64) -> Vec2 {
        let (i, _) = self.segment_at(s);
        self.seg_dir[i].perp()
    }

    /// Heading of the centerline segment containing `s`.
    pub fn segment_heading_at(&self, s: f64) -> f64 {
        let (i, _) = self.segment_at(s);
        self.seg_dir[i].angle()
    }

    /// Centerline tangent heading at `s`, interpolated between vertex
    /// tangents so it varies continuously along the track.
    pub fn heading_at(&self, s: f64) -> f64 {
        let n = self.waypoints.len();
        let (i, along) = self.segment_at(s);
        let u = along / self.seg_len[i];
        let h0 = self.vertex_heading[i];
        let h1 = self.vertex_heading[(i + 1) % n];
        wrap_angle(h0 + u * wrap_angle(h1 - h0))
    }

    /// Signed curvature of the centerline around `s` (1/m, left turns positive),
    /// estimated from the heading change over the adjacent segments.
    pub fn curvature_at(&self, s: f64) -> f64 {
        let n = self.waypoints.len();
        let (i, _) = self.segment_at(s);
        let next = (i + 1) % n;
        let turn = wrap_angle(self.seg_dir[next].angle() - self.seg_dir[i].angle());
        turn / (0.5 * (self.seg_len[i] + self.seg_len[next]))
    }

    /// Nearest-point projection onto the centerline. Ties go to the smallest `s`.
    pub fn project(&self, p: Vec2) -> TrackFrame {
        let best = self
            .center_grid
            .nearest(p, |seg, best| self.consider_segment(seg, p, best))
            .unwrap_or_else(|| {
                let mut best = None;
                for seg in 0..self.waypoints.len() {
                    self.consider_segment(seg, p, &mut best);
                }
                best.expect("track has segments")
            });
        self.frame_from(p, best)
    }

    fn consider_segment(&self, seg: usize, p: Vec2, best: &mut Option<Candidate>) -> f64 {
        let a = self.waypoints[seg];
        let dir = self.seg_dir[seg];
        let len = self.seg_len[seg];
        let along = (p - a).dot(dir).clamp(0.0, len);
        let q = a + dir * along;
        let dist = p.distance(q);
        let s = self.wrap_s(self.cum_s[seg] + along);
        let cand = Candidate {
            dist,
            s,
            seg,
            along,
            point: q,
        };
        let replace = match best {
            None => true,
            Some(b) => dist < b.dist || (dist == b.dist && s < b.s),
        };
        if replace {
            *best = Some(cand);
        }
        best.as_ref().map_or(f64::INFINITY, |b| b.dist)
    }

    fn frame_from(&self, p: Vec2, c: Candidate) -> TrackFrame {
        let n = self.waypoints.len();
        let offset = p - c.point;
        let side = if c.along <= 0.0 {
            offset.dot(self.vertex_normal[c.seg])
        } else if c.along >= self.seg_len[c.seg] {
            offset.dot(self.vertex_normal[(c.seg + 1) % n])
        } else {
            self.seg_dir[c.seg].cross(offset)
        };
        let d = if side > 0.0 {
            c.dist
        } else if side < 0.0 {
            -c.dist
        } else {
            0.0
        };
        let seg = if c.along >= self.seg_len[c.seg] {
            (c.seg + 1) % n
        } else {
            c.seg
        };
        TrackFrame {
            s: c.s,
            d,
            psi_ref: self.seg_dir[seg].angle(),
        }
    }

    /// Whether `p` lies strictly inside the corridor.
    pub fn contains(&self, p: Vec2) -> bool {
        self.project(p).d.abs() < self.half_width
    }

    /// Distance from `origin` along unit `direction` to the first corridor
    /// edge, clamped to `max_range`. The origin must be inside the corridor.
    pub fn ray_to_edge(&self, origin: Vec2, direction: Vec2, max_range: f64) -> Result<f64> {
        let frame = self.project(origin);
        if frame.d.abs() >= self.half_width {
            return Err(Error::OffTrack {
                offset: frame.d.abs(),
                half_width: self.half_width,
            });
        }
        Ok(self.cast_ray(origin, direction, max_range))
    }

    /// Ray cast without the corridor check; callers must already know the
    /// origin is on track.
    pub(crate) fn cast_ray(&self, origin: Vec2, direction: Vec2, max_range: f64) -> f64 {
        let n = self.waypoints.len();
        let hit = self.edge_grid.first_hit(origin, direction, max_range, |seg| {
            let (a, b) = if seg < n {
                (self.left_edge[seg], self.left_edge[(seg + 1) % n])
            } else {
                let i = seg - n;
                (self.right_edge[i], self.right_edge[(i + 1) % n])
            };
            ray_segment(origin, direction, a, b)
        });
        hit.map_or(max_range, |t| t.min(max_range))
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    dist: f64,
    s: f64,
    seg: usize,
    along: f64,
    point: Vec2,
}

fn check_simple(segments: &[(Vec2, Vec2)], grid: &SegmentGrid) -> Result<()> {
    let n = segments.len();
    for i in 0..n {
        let (a, b) = segments[i];
        let mut bad = None;
        grid.for_each_in_bbox(a, b, |j| {
            if j <= i || bad.is_some() {
                return;
            }
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                return;
            }
            let (c, d) = segments[j];
            if segments_intersect(a, b, c, d) {
                bad = Some(j);
            }
        });
        if let Some(j) = bad {
            return Err(Error::InvalidTrack(format!(
                "centerline self-intersects (segments {i} and {j})"
            )));
        }
    }
    Ok(())
}

pub fn load_track(path: impl AsRef<Path>) -> Result<TrackGeometry> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: TrackFile =
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
    TrackGeometry::from_file_data(file)
}

pub fn save_track(track: &TrackGeometry, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(&track.to_file_data())
        .map_err(|e| Error::parse("track", e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Uniform grid bucketing segments by bounding box.
#[derive(Debug, Clone)]
struct SegmentGrid {
    origin: Vec2,
    cell: f64,
    nx: usize,
    ny: usize,
    cells: Vec<Vec<u32>>,
}

impl SegmentGrid {
    fn build(segments: &[(Vec2, Vec2)], cell: f64) -> Self {
        let mut lo = Vec2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &(a, b) in segments {
            for p in [a, b] {
                lo.x = lo.x.min(p.x);
                lo.y = lo.y.min(p.y);
                hi.x = hi.x.max(p.x);
                hi.y = hi.y.max(p.y);
            }
        }
        let origin = lo - Vec2::new(cell, cell);
        let nx = (((hi.x - origin.x) / cell).floor() as usize + 2).max(1);
        let ny = (((hi.y - origin.y) / cell).floor() as usize + 2).max(1);
        let mut grid = SegmentGrid {
            origin,
            cell,
            nx,
            ny,
            cells: vec![Vec::new(); nx * ny],
        };
        for (k, &(a, b)) in segments.iter().enumerate() {
            let (x0, y0) = grid.cell_of(Vec2::new(a.x.min(b.x), a.y.min(b.y)));
            let (x1, y1) = grid.cell_of(Vec2::new(a.x.max(b.x), a.y.max(b.y)));
            for cy in y0..=y1 {
                for cx in x0..=x1 {
                    grid.cells[cy * nx + cx].push(k as u32);
                }
            }
        }
        grid
    }

    fn cell_of(&self, p: Vec2) -> (usize, usize) {
        let cx = ((p.x - self.origin.x) / self.cell).floor();
        let cy = ((p.y - self.origin.y) / self.cell).floor();
        (
            (cx.max(0.0) as usize).min(self.nx - 1),
            (cy.max(0.0) as usize).min(self.ny - 1),
        )
    }

    fn inside(&self, p: Vec2) -> bool {
        let rel = p - self.origin;
        rel.x >= 0.0
            && rel.y >= 0.0
            && rel.x < self.nx as f64 * self.cell
            && rel.y < self.ny as f64 * self.cell
    }

    fn for_each_in_bbox(&self, a: Vec2, b: Vec2, mut f: impl FnMut(usize)) {
        let (x0, y0) = self.cell_of(Vec2::new(a.x.min(b.x), a.y.min(b.y)));
        let (x1, y1) = self.cell_of(Vec2::new(a.x.max(b.x), a.y.max(b.y)));
        for cy in y0..=y1 {
            for cx in x0..=x1 {
                for &k in &self.cells[cy * self.nx + cx] {
                    f(k as usize);
                }
            }
        }
    }

    /// Ring search around `p`. `visit` updates the running best and returns its
    /// distance. Returns `None` when `p` is outside the grid (caller falls back
    /// to brute force).
    fn nearest(
        &self,
        p: Vec2,
        mut visit: impl FnMut(usize, &mut Option<Candidate>) -> f64,
    ) -> Option<Candidate> {
        if !self.inside(p) {
            return None;
        }
        let (cx, cy) = self.cell_of(p);
        let mut best: Option<Candidate> = None;
        let mut best_dist = f64::INFINITY;
        let max_ring = self.nx.max(self.ny);
        for r in 0..=max_ring {
            let r_i = r as isize;
            for dy in -r_i..=r_i {
                for dx in -r_i..=r_i {
                    if dx.abs() != r_i && dy.abs() != r_i {
                        continue;
                    }
                    let x = cx as isize + dx;
                    let y = cy as isize + dy;
                    if x < 0 || y < 0 || x >= self.nx as isize || y >= self.ny as isize {
                        continue;
                    }
                    for &k in &self.cells[y as usize * self.nx + x as usize] {
                        best_dist = visit(k as usize, &mut best);
                    }
                }
            }
            // Unvisited cells are at least `r * cell` away from p. Strict so that
            // equal-distance candidates in the next ring still compete on `s`.
            if best.is_some() && best_dist < r as f64 * self.cell {
                break;
            }
        }
        best
    }

    /// Walks grid cells along a ray (Amanatides-Woo) and returns the smallest
    /// hit parameter reported by `hit`.
    fn first_hit(
        &self,
        origin: Vec2,
        dir: Vec2,
        max_range: f64,
        mut hit: impl FnMut(usize) -> Option<f64>,
    ) -> Option<f64> {
        if !self.inside(origin) {
            let mut best: Option<f64> = None;
            for cell in &self.cells {
                for &k in cell {
                    if let Some(t) = hit(k as usize) {
                        best = Some(best.map_or(t, |b: f64| b.min(t)));
                    }
                }
            }
            return best;
        }
        let (mut x, mut y) = self.cell_of(origin);
        let step_x: isize = if dir.x > 0.0 { 1 } else { -1 };
        let step_y: isize = if dir.y > 0.0 { 1 } else { -1 };
        let next_boundary = |c: usize, step: isize, o: f64| {
            let edge = if step > 0 { c as f64 + 1.0 } else { c as f64 };
            edge * self.cell + o
        };
        let mut t_max_x = if dir.x != 0.0 {
            (next_boundary(x, step_x, self.origin.x) - origin.x) / dir.x
        } else {
            f64::INFINITY
        };
        let mut t_max_y = if dir.y != 0.0 {
            (next_boundary(y, step_y, self.origin.y) - origin.y) / dir.y
        } else {
            f64::INFINITY
        };
        let t_delta_x = if dir.x != 0.0 { self.cell / dir.x.abs() } else { f64::INFINITY };
        let t_delta_y = if dir.y != 0.0 { self.cell / dir.y.abs() } else { f64::INFINITY };
        let mut best: Option<f64> = None;
        loop {
            for &k in &self.cells[y * self.nx + x] {
                if let Some(t) = hit(k as usize) {
                    if best.map_or(true, |b| t < b) {
                        best = Some(t);
                    }
                }
            }
            let t_exit = t_max_x.min(t_max_y);
            if let Some(b) = best {
                if b <= t_exit {
                    return best;
                }
            }
            if t_exit > max_range {
                return best;
            }
            if t_max_x < t_max_y {
                let nx = x as isize + step_x;
                if nx < 0 || nx >= self.nx as isize {
                    return best;
                }
                x = nx as usize;
                t_max_x += t_delta_x;
            } else {
                let ny = y as isize + step_y;
                if ny < 0 || ny >= self.ny as isize {
                    return best;
                }
                y = ny as usize;
                t_max_y += t_delta_y;
            }
        }
    }
}

/// Rectangle centerline with `per_side` evenly spaced waypoints on each side,
/// counter-clockwise from `(0, 0)`.
pub fn rectangle_track(
    name: &str,
    length: f64,
    height: f64,
    per_side: usize,
    half_width: f64,
) -> Result<TrackGeometry> {
    let corners = [
        Vec2::new(0.0, 0.0),
        Vec2::new(length, 0.0),
        Vec2::new(length, height),
        Vec2::new(0.0, height),
    ];
    let mut pts = Vec::with_capacity(4 * per_side);
    for k in 0..4 {
        let a = corners[k];
        let b = corners[(k + 1) % 4];
        for j in 0..per_side {
            pts.push(a + (b - a) * (j as f64 / per_side as f64));
        }
    }
    TrackGeometry::new(name, pts, half_width)
}

/// Circle centerline of `n` waypoints, counter-clockwise.
pub fn circle_track(name: &str, radius: f64, n: usize, half_width: f64) -> Result<TrackGeometry> {
    let pts = (0..n)
        .map(|i| Vec2::from_angle(2.0 * PI * i as f64 / n as f64) * radius)
        .collect();
    TrackGeometry::new(name, pts, half_width)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> TrackGeometry {
        let pts = vec![
            Vec2::new(0.0, 0.0),
            Vec2::new(100.0, 0.0),
            Vec2::new(100.0, 100.0),
            Vec2::new(0.0, 100.0),
        ];
        TrackGeometry::new("square", pts, 7.5).unwrap()
    }

    #[test]
    fn square_perimeter() {
        let t = square();
        assert_eq!(t.total_length(), 400.0);
        assert_eq!(t.half_width(), 7.5);
    }

    #[test]
    fn zero_width_rejected() {
        let file = TrackFile {
            name: "bad".into(),
            width_m: 0.0,
            waypoints: vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
        };
        assert!(matches!(
            TrackGeometry::from_file_data(file),
            Err(Error::InvalidTrack(_))
        ));
    }

    #[test]
    fn duplicate_and_self_intersecting_rejected() {
        let dup = vec![Vec2::new(0.0, 0.0), Vec2::new(0.0, 0.0), Vec2::new(1.0, 1.0), Vec2::new(2.0, 0.0)];
        assert!(TrackGeometry::new("dup", dup, 1.0).is_err());
        let closed_twice = vec![
            Vec2::new(0.0, 0.0),
            Vec2::new(10.0, 0.0),
            Vec2::new(10.0, 10.0),
            Vec2::new(0.0, 0.0),
        ];
        assert!(TrackGeometry::new("closed", closed_twice, 1.0).is_err());
        let bowtie: Vec<Vec2> = (0..40)
            .map(|i| {
                let t = i as f64 * std::f64::consts::TAU / 40.0;
                Vec2::new(100.0 * t.cos(), 50.0 * (2.0 * t).sin())
            })
            .collect();
        let err = TrackGeometry::new("bowtie", bowtie, 1.0).unwrap_err();
        assert!(err.to_string().contains("self-intersects"), "{err}");
    }

    #[test]
    fn projection_on_straight() {
        let t = rectangle_track("rect", 100.0, 60.0, 10, 7.5).unwrap();
        let f = t.project(Vec2::new(10.0, 3.0));
        assert!((f.s - 10.0).abs() < 1e-12);
        assert!((f.d - 3.0).abs() < 1e-12);
        let f = t.project(Vec2::new(10.0, -3.0));
        assert!((f.d + 3.0).abs() < 1e-12);
        let f = t.project(Vec2::new(37.0, 0.0));
        assert_eq!(f.d, 0.0);
        assert_eq!(f.psi_ref, 0.0);
    }

    #[test]
    fn projection_far_outside_grid_falls_back() {
        let t = square();
        let f = t.project(Vec2::new(50.0, -5000.0));
        assert!((f.s - 50.0).abs() < 1e-9);
        assert!((f.d + 5000.0).abs() < 1e-9);
    }

    #[test]
    fn projection_tie_prefers_smallest_s() {
        // Center of the square is equidistant from all four sides.
        let t = square();
        let f = t.project(Vec2::new(50.0, 50.0));
        assert_eq!(f.s, 50.0);
        assert_eq!(f.d, 50.0);
    }

    #[test]
    fn ray_perpendicular_and_diagonal() {
        let t = rectangle_track("rect", 400.0, 100.0, 40, 7.5).unwrap();
        let o = Vec2::new(200.0, 0.0);
        let left = t.ray_to_edge(o, Vec2::new(0.0, 1.0), 200.0).unwrap();
        assert!((left - 7.5).abs() < 1e-12);
        let diag = t.ray_to_edge(o, Vec2::from_angle(PI / 4.0), 200.0).unwrap();
        assert!((diag - 7.5 / (PI / 4.0).sin()).abs() < 1e-9);
        assert!((diag - 10.6066).abs() < 1e-4);
    }

    #[test]
    fn ray_clamped_on_long_straight() {
        let t = rectangle_track("long", 2000.0, 200.0, 100, 7.5).unwrap();
        let r = t.ray_to_edge(Vec2::new(500.0, 0.0), Vec2::new(1.0, 0.0), 200.0).unwrap();
        assert_eq!(r, 200.0);
    }

    #[test]
    fn ray_from_outside_is_error() {
        let t = square();
        assert!(matches!(
            t.ray_to_edge(Vec2::new(50.0, -20.0), Vec2::new(0.0, 1.0), 200.0),
            Err(Error::OffTrack { .. })
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        let t = circle_track("ring", 120.0, 64, 7.5).unwrap();
        save_track(&t, &path).unwrap();
        let back = load_track(&path).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.total_length(), t.total_length());
    }

    #[test]
    fn heading_is_continuous_on_circle() {
        let t = circle_track("ring", 100.0, 200, 7.5).unwrap();
        let mut prev = t.heading_at(0.0);
        let mut s = 0.05;
        while s < t.total_length() {
            let h = t.heading_at(s);
            assert!(wrap_angle(h - prev).abs() < 1e-3);
            prev = h;
            s += 0.05;
        }
        assert!(t.curvature_at(10.0) > 0.0);
    }
}
