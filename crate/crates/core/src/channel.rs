//! Geometric-optics channel: per-tile reflected path coefficients, optional
//! single-bounce wall paths, coherent received power and coverage maps.
//!
//! Every reflector tile is a flat perfect reflector whose re-radiation is
//! concentrated around the specular direction by a `cos(psi)^q` lobe. Field
//! contributions of all serving tiles add coherently, so `N` tiles in phase
//! give `N^2` power.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{tile_centers, tile_normal, SegmentSpec, Vec3};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const VACUUM_PERMITTIVITY: f64 = 8.854_187_812_8e-12;
/// RSSI reported for exactly zero received field.
pub const RSSI_SENTINEL_DBM: f64 = -300.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Directivity {
    /// Exponent derived from the tile aperture: the `cos^q` lobe loses half
    /// its power at half the aperture's half-power beamwidth `0.886 lambda / a`.
    Auto,
    Exponent(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HOtherMode {
    Zero,
    Walls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub carrier_hz: f64,
    pub tx_power_dbm: f64,
    pub directivity: Directivity,
    pub h_other_mode: HOtherMode,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            carrier_hz: 60e9,
            tx_power_dbm: 5.0,
            directivity: Directivity::Auto,
            h_other_mode: HOtherMode::Zero,
        }
    }
}

impl ChannelConfig {
    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.carrier_hz > 0.0 && self.carrier_hz.is_finite()) {
            return Err(Error::Config("carrier frequency must be positive".into()));
        }
        if !self.tx_power_dbm.is_finite() {
            return Err(Error::Config("transmit power must be finite".into()));
        }
        if let Directivity::Exponent(q) = self.directivity {
            if !(q > 0.0 && q.is_finite()) {
                return Err(Error::Config(format!("directivity exponent must be positive, got {q}")));
            }
        }
        Ok(())
    }

    /// Directivity exponent for tiles of the given pitch.
    pub fn directivity_exponent(&self, pitch: f64) -> f64 {
        match self.directivity {
            Directivity::Exponent(q) => q,
            Directivity::Auto => {
                let hpbw = 0.886 * self.wavelength() / pitch;
                // a tile smaller than ~lambda radiates almost isotropically
                let half = (0.5 * hpbw).min(std::f64::consts::FRAC_PI_2 - 1e-6);
                0.5_f64.ln() / (2.0 * half.cos().ln())
            }
        }
    }

    pub fn tile_model(&self, pitch: f64) -> TileModel {
        TileModel { wavelength: self.wavelength(), exponent: self.directivity_exponent(pitch) }
    }
}

/// Resolved parameters of a single tile's reflected path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TileModel {
    pub wavelength: f64,
    pub exponent: f64,
}

/// Free-space spreading and propagation phase over a path of length `d`.
pub fn free_space(wavelength: f64, d: f64) -> Complex64 {
    let amp = wavelength / (4.0 * std::f64::consts::PI * d);
    // reduce cycles first to keep the phase accurate over long paths
    let cycles = (d / wavelength).fract();
    Complex64::from_polar(amp, -2.0 * std::f64::consts::PI * cycles)
}

impl TileModel {
    /// Reflected coefficient of the path `ap -> tile -> user` for a tile with
    /// the given unit normal.
    pub fn coefficient(&self, ap: Vec3, tile: Vec3, normal: Vec3, user: Vec3) -> Result<Complex64> {
        let inc = tile - ap;
        let out = user - tile;
        let d1 = inc.norm();
        let d2 = out.norm();
        if d1 < 1e-12 || d2 < 1e-12 {
            return Err(Error::DegenerateGeometry("path endpoint coincides with tile".into()));
        }
        let inc = inc / d1;
        let out = out / d2;
        // both ends must see the reflecting face
        if (-inc).dot(normal) <= 0.0 || out.dot(normal) <= 0.0 {
            return Ok(Complex64::new(0.0, 0.0));
        }
        let cos_psi = inc.reflect(normal).dot(out);
        if cos_psi <= 0.0 {
            return Ok(Complex64::new(0.0, 0.0));
        }
        let gain = cos_psi.powf(self.exponent);
        Ok(free_space(self.wavelength, d1 + d2) * gain)
    }
}

/// Received power in watts and dBm for a total complex field gain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RxPower {
    pub watts: f64,
    pub rssi_dbm: f64,
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn received_power(field: Complex64, tx_power_dbm: f64) -> RxPower {
    let mag = field.norm();
    let watts = dbm_to_watts(tx_power_dbm) * mag * mag;
    let rssi_dbm = if mag > 0.0 {
        (tx_power_dbm + 20.0 * mag.log10()).max(RSSI_SENTINEL_DBM)
    } else {
        RSSI_SENTINEL_DBM
    };
    RxPower { watts, rssi_dbm }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub eps_r: f64,
    pub sigma: f64,
}

impl Material {
    pub const CONCRETE: Material = Material { eps_r: 5.31, sigma: 0.0326 };
    pub const MARBLE: Material = Material { eps_r: 7.0, sigma: 0.01 };

    pub fn complex_permittivity(&self, carrier_hz: f64) -> Complex64 {
        Complex64::new(
            self.eps_r,
            -self.sigma / (2.0 * std::f64::consts::PI * carrier_hz * VACUUM_PERMITTIVITY),
        )
    }

    /// Perpendicular-polarization Fresnel reflection coefficient at incidence
    /// angle `theta_i` (radians from the surface normal).
    pub fn fresnel_perpendicular(&self, theta_i: f64, carrier_hz: f64) -> Complex64 {
        let eps = self.complex_permittivity(carrier_hz);
        let c = theta_i.cos();
        let s2 = theta_i.sin().powi(2);
        let root = (eps - s2).sqrt();
        (c - root) / (c + root)
    }
}

/// Finite planar rectangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub center: Vec3,
    pub axis_u: Vec3,
    pub axis_v: Vec3,
    pub half_u: f64,
    pub half_v: f64,
}

impl Panel {
    pub fn normal(&self) -> Vec3 {
        self.axis_u.cross(self.axis_v)
    }

    fn contains_in_plane(&self, p: Vec3) -> bool {
        let d = p - self.center;
        d.dot(self.axis_u).abs() <= self.half_u && d.dot(self.axis_v).abs() <= self.half_v
    }

    /// Whether the open segment `a -> b` crosses the panel.
    pub fn blocks(&self, a: Vec3, b: Vec3) -> bool {
        let n = self.normal();
        let da = (a - self.center).dot(n);
        let db = (b - self.center).dot(n);
        if da * db >= 0.0 {
            return false;
        }
        let t = da / (da - db);
        self.contains_in_plane(a + (b - a) * t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Wall {
    pub panel: Panel,
    pub material: Material,
}

/// Single-bounce `ap -> wall -> user` coefficient by the image method.
/// Returns `Error::OutsideWall` when the specular point misses the panel.
pub fn wall_bounce_coefficient(ap: Vec3, user: Vec3, wall: &Wall, cfg: &ChannelConfig) -> Result<Complex64> {
    let p = &wall.panel;
    let n = p.normal();
    let ha = (ap - p.center).dot(n);
    let hu = (user - p.center).dot(n);
    if !(ha * hu > 0.0) {
        return Err(Error::DegenerateGeometry("ap and user must lie strictly on the same side of the wall".into()));
    }
    let image = ap - n * (2.0 * ha);
    let t = ha / (ha + hu);
    let spec_point = image + (user - image) * t;
    if !p.contains_in_plane(spec_point) {
        return Err(Error::OutsideWall);
    }
    let to_ap = (ap - spec_point)
        .try_normalize()
        .ok_or_else(|| Error::DegenerateGeometry("ap on the wall".into()))?;
    let theta_i = to_ap.dot(n).abs().clamp(0.0, 1.0).acos();
    let gamma = wall.material.fresnel_perpendicular(theta_i, cfg.carrier_hz);
    let d = image.distance(user);
    Ok(gamma * free_space(cfg.wavelength(), d))
}

/// One reflector segment with its tile centers precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub spec: SegmentSpec,
    pub tiles: Vec<Vec3>,
}

impl Segment {
    pub fn new(spec: SegmentSpec) -> Result<Self> {
        spec.validate()?;
        let tiles = tile_centers(&spec);
        Ok(Self { spec, tiles })
    }

    pub fn reference(&self) -> Vec3 {
        self.spec.reference()
    }
}

/// Tile normals of a segment focused at `focal`; `None` marks a tile whose
/// orientation is undefined for this focal point (it then reflects nothing).
pub fn orient_segment(segment: &Segment, ap: Vec3, focal: Vec3) -> Vec<Option<Vec3>> {
    segment.tiles.iter().map(|&t| tile_normal(t, ap, focal).ok()).collect()
}

/// Axis-aligned rectangle in the horizontal plane where users live.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Region {
    pub fn contains(&self, p: Vec3) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn depth(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }
}

/// Static propagation environment.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub ap: Vec3,
    pub segments: Vec<Segment>,
    pub walls: Vec<Wall>,
    pub obstructions: Vec<Panel>,
    pub region: Region,
    pub user_height: f64,
    pub channel: ChannelConfig,
    tile_models: Vec<TileModel>,
}

impl Scene {
    pub fn new(
        ap: Vec3,
        segment_specs: Vec<SegmentSpec>,
        walls: Vec<Wall>,
        obstructions: Vec<Panel>,
        region: Region,
        user_height: f64,
        channel: ChannelConfig,
    ) -> Result<Self> {
        channel.validate()?;
        if segment_specs.is_empty() {
            return Err(Error::Config("scene needs at least one reflector segment".into()));
        }
        if !(region.x_max > region.x_min && region.y_max > region.y_min) {
            return Err(Error::Config("coverage region must have positive extent".into()));
        }
        let segments = segment_specs.into_iter().map(Segment::new).collect::<Result<Vec<_>>>()?;
        let tile_models = segments.iter().map(|s| channel.tile_model(s.spec.pitch)).collect();
        Ok(Self { ap, segments, walls, obstructions, region, user_height, channel, tile_models })
    }

    pub fn segment_refs(&self) -> Vec<Vec3> {
        self.segments.iter().map(Segment::reference).collect()
    }

    pub fn tile_model(&self, l: usize) -> TileModel {
        self.tile_models[l]
    }

    pub fn orient(&self, l: usize, focal: Vec3) -> Vec<Option<Vec3>> {
        orient_segment(&self.segments[l], self.ap, focal)
    }

    /// Coherent field at `user` from segment `l` with the given tile normals.
    pub fn segment_field(&self, l: usize, normals: &[Option<Vec3>], user: Vec3) -> Result<Complex64> {
        let seg = &self.segments[l];
        let model = self.tile_models[l];
        let mut acc = Complex64::new(0.0, 0.0);
        for (&tile, n) in seg.tiles.iter().zip(normals) {
            if let Some(n) = n {
                acc += model.coefficient(self.ap, tile, *n, user)?;
            }
        }
        Ok(acc)
    }

    /// Field from environmental paths other than the reflectors.
    pub fn other_field(&self, user: Vec3) -> Complex64 {
        match self.channel.h_other_mode {
            HOtherMode::Zero => Complex64::new(0.0, 0.0),
            HOtherMode::Walls => self
                .walls
                .iter()
                .filter_map(|w| {
                    let h = wall_bounce_coefficient(self.ap, user, w, &self.channel).ok()?;
                    let n = w.panel.normal();
                    let ha = (self.ap - w.panel.center).dot(n);
                    let hu = (user - w.panel.center).dot(n);
                    let image = self.ap - n * (2.0 * ha);
                    let p = image + (user - image) * (ha / (ha + hu));
                    let blocked = self.obstructions.iter().any(|o| o.blocks(self.ap, p) || o.blocks(p, user));
                    (!blocked).then_some(h)
                })
                .sum(),
        }
    }

    /// RSSI at `user` served by the listed segments, each with its normals.
    pub fn received(&self, user: Vec3, serving: &[(usize, &[Option<Vec3>])]) -> Result<RxPower> {
        let mut field = self.other_field(user);
        for &(l, normals) in serving {
            field += self.segment_field(l, normals, user)?;
        }
        Ok(received_power(field, self.channel.tx_power_dbm))
    }
}

/// Horizontal sampling grid at a fixed height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
    pub height: f64,
}

impl GridSpec {
    pub fn over_region(region: &Region, nx: usize, ny: usize, height: f64) -> Self {
        Self { x_min: region.x_min, x_max: region.x_max, y_min: region.y_min, y_max: region.y_max, nx, ny, height }
    }

    /// Center of cell (`iy`, `ix`).
    pub fn cell_center(&self, iy: usize, ix: usize) -> Vec3 {
        let dx = (self.x_max - self.x_min) / self.nx as f64;
        let dy = (self.y_max - self.y_min) / self.ny as f64;
        Vec3::new(self.x_min + (ix as f64 + 0.5) * dx, self.y_min + (iy as f64 + 0.5) * dy, self.height)
    }
}

/// RSSI (dBm) over a grid with every segment focused at its focal point.
/// Rows index y, columns index x.
pub fn coverage_map(scene: &Scene, focals: &[Vec3], grid: &GridSpec) -> Result<Vec<Vec<f64>>> {
    if focals.len() != scene.segments.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} focal points for {} segments",
            focals.len(),
            scene.segments.len()
        )));
    }
    let normals: Vec<_> = focals.iter().enumerate().map(|(l, &f)| scene.orient(l, f)).collect();
    coverage_map_oriented(scene, &normals, grid)
}

/// Coverage map for explicit per-segment tile normals.
pub fn coverage_map_oriented(scene: &Scene, normals: &[Vec<Option<Vec3>>], grid: &GridSpec) -> Result<Vec<Vec<f64>>> {
    use rayon::prelude::*;

    if grid.nx == 0 || grid.ny == 0 {
        return Err(Error::Config("coverage grid needs at least one cell".into()));
    }
    let serving: Vec<(usize, &[Option<Vec3>])> = normals.iter().enumerate().map(|(l, n)| (l, n.as_slice())).collect();
    (0..grid.ny)
        .into_par_iter()
        .map(|iy| {
            (0..grid.nx)
                .map(|ix| Ok(scene.received(grid.cell_center(iy, ix), &serving)?.rssi_dbm))
                .collect()
        })
        .collect()
}
