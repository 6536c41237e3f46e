//! Two bouncing colored shapes on a white canvas, observed through square
//! patches around query viewpoints.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::parallel;

pub const CANVAS: usize = 130;
pub const OBJECT: usize = 38;
pub const SPEED: f64 = 13.0;
pub const PATCH: usize = 64;
pub const OBSERVATIONS_PER_STEP: usize = 20;

const HALF: f64 = OBJECT as f64 / 2.0;
/// Valid range of object centers so that the bounding box stays on the canvas.
const CENTER_MIN: f64 = HALF;
const CENTER_MAX: f64 = CANVAS as f64 - HALF;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Triangle,
    Square,
    Circle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Triangle, Shape::Square, Shape::Circle];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Magenta,
    Blue,
    Cyan,
    Green,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Magenta,
        Color::Blue,
        Color::Cyan,
        Color::Green,
        Color::Yellow,
    ];

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Magenta => [1.0, 0.0, 1.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Cyan => [0.0, 1.0, 1.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }

    /// The color an object switches to when its flip fires.
    pub fn partner(self) -> Color {
        match self {
            Color::Red => Color::Magenta,
            Color::Magenta => Color::Red,
            Color::Blue => Color::Cyan,
            Color::Cyan => Color::Blue,
            Color::Green => Color::Yellow,
            Color::Yellow => Color::Green,
        }
    }

    /// Occlusion rank: a higher rank covers a lower one.
    ///
    /// green/yellow cover red/magenta, red/magenta cover blue/cyan, and within
    /// each pair magenta > red, cyan > blue, yellow > green.
    fn rank(self) -> u8 {
        match self {
            Color::Blue => 0,
            Color::Cyan => 1,
            Color::Red => 2,
            Color::Magenta => 3,
            Color::Green => 4,
            Color::Yellow => 5,
        }
    }
}

/// Whether object `a` (at index `a_index`) is drawn over object `b` where they overlap.
pub fn covers(a: Color, a_index: usize, b: Color, b_index: usize) -> bool {
    match a.rank().cmp(&b.rank()) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => a_index < b_index,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    /// Center `(row, col)` in pixels.
    pub position: [f64; 2],
    /// `(drow, dcol)` in pixels per step.
    pub velocity: [f64; 2],
}

impl SceneObject {
    pub fn speed(&self) -> f64 {
        self.velocity[0].hypot(self.velocity[1])
    }

    /// Whether the bounding box lies fully on the canvas.
    pub fn inside_canvas(&self) -> bool {
        self.position
            .iter()
            .all(|&p| p - HALF >= -1e-9 && p + HALF <= CANVAS as f64 + 1e-9)
    }

    /// Whether the pixel whose center is `(r, c)` is covered by the shape.
    fn contains(&self, r: f64, c: f64) -> bool {
        let (cr, cc) = (self.position[0], self.position[1]);
        let (dr, dc) = (r - cr, c - cc);
        match self.shape {
            Shape::Square => dr >= -HALF && dr < HALF && dc >= -HALF && dc < HALF,
            Shape::Circle => dr * dr + dc * dc <= HALF * HALF,
            Shape::Triangle => {
                // upward equilateral triangle with its base on the box's bottom edge
                let height = OBJECT as f64 * 3f64.sqrt() / 2.0;
                let below_apex = dr - (HALF - height);
                below_apex >= 0.0 && dr < HALF && dc.abs() <= below_apex / height * HALF
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlipEvent {
    pub step: usize,
    pub color: Color,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneState {
    pub objects: [SceneObject; 2],
    pub flips: [Option<FlipEvent>; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    /// Episode length; flips fire at a step in `[2, steps - 1]`.
    pub steps: usize,
    pub flip_probability: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            flip_probability: 0.5,
        }
    }
}

/// Channels-last RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(height: usize, width: usize, v: f32) -> Self {
        Self {
            height,
            width,
            data: vec![v; height * width * 3],
        }
    }

    pub fn pixel(&self, r: usize, c: usize) -> [f32; 3] {
        let i = (r * self.width + c) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn set(&mut self, r: usize, c: usize, rgb: [f32; 3]) {
        let i = (r * self.width + c) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Box-filter downsampling by an integer factor.
    pub fn downsample(&self, factor: usize) -> Image {
        if factor <= 1 {
            return self.clone();
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = Image::filled(h, w, 0.0);
        let norm = 1.0 / (factor * factor) as f32;
        for r in 0..h {
            for c in 0..w {
                let mut acc = [0f32; 3];
                for dr in 0..factor {
                    for dc in 0..factor {
                        let p = self.pixel(r * factor + dr, c * factor + dc);
                        for k in 0..3 {
                            acc[k] += p[k];
                        }
                    }
                }
                out.set(r, c, acc.map(|v| v * norm));
            }
        }
        out
    }

    /// `[3, h, w]` planar copy.
    pub fn to_chw(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for (i, px) in self.data.chunks(3).enumerate() {
            for k in 0..3 {
                out[k * hw + i] = px[k];
            }
        }
        out
    }

    pub fn from_chw(height: usize, width: usize, chw: &[f32]) -> Self {
        let hw = height * width;
        let mut data = vec![0.0; 3 * hw];
        for i in 0..hw {
            for k in 0..3 {
                data[i * 3 + k] = chw[k * hw + i];
            }
        }
        Self { height, width, data }
    }
}

fn random_object<R: Rng + ?Sized>(rng: &mut R) -> SceneObject {
    let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
    let color = Color::ALL[rng.random_range(0..Color::ALL.len())];
    let position = [
        rng.random_range(CENTER_MIN..=CENTER_MAX),
        rng.random_range(CENTER_MIN..=CENTER_MAX),
    ];
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    SceneObject {
        shape,
        color,
        position,
        velocity: [SPEED * angle.sin(), SPEED * angle.cos()],
    }
}

pub fn init_scene(seed: u64, cfg: &SceneConfig) -> SceneState {
    init_scene_with(&mut ChaCha8Rng::seed_from_u64(seed), cfg)
}

fn init_scene_with<R: Rng + ?Sized>(rng: &mut R, cfg: &SceneConfig) -> SceneState {
    let objects = [random_object(rng), random_object(rng)];
    let mut flips = [None, None];
    for (flip, obj) in flips.iter_mut().zip(&objects) {
        let fires = rng.random_bool(cfg.flip_probability.clamp(0.0, 1.0));
        if fires && cfg.steps >= 3 {
            *flip = Some(FlipEvent {
                step: rng.random_range(2..=cfg.steps - 1),
                color: obj.color.partner(),
            });
        }
    }
    SceneState { objects, flips }
}

/// Reflects one coordinate off the walls, mirroring any overshoot back inside.
fn bounce(pos: f64, vel: f64) -> (f64, f64) {
    let next = pos + vel;
    if next < CENTER_MIN {
        (2.0 * CENTER_MIN - next, -vel)
    } else if next > CENTER_MAX {
        (2.0 * CENTER_MAX - next, -vel)
    } else {
        (next, vel)
    }
}

/// Advances the scene to step `t`, firing any flip scheduled at `t`.
pub fn step_scene(state: &SceneState, t: usize) -> SceneState {
    let mut next = state.clone();
    for (obj, flip) in next.objects.iter_mut().zip(&state.flips) {
        for axis in 0..2 {
            let (p, v) = bounce(obj.position[axis], obj.velocity[axis]);
            obj.position[axis] = p;
            obj.velocity[axis] = v;
        }
        if let Some(f) = flip {
            if f.step == t {
                obj.color = f.color;
            }
        }
    }
    next
}

pub fn render_canvas(state: &SceneState) -> Image {
    let mut img = Image::filled(CANVAS, CANVAS, 1.0);
    for r in 0..CANVAS {
        for c in 0..CANVAS {
            let (pr, pc) = (r as f64 + 0.5, c as f64 + 0.5);
            let mut top: Option<usize> = None;
            for (i, obj) in state.objects.iter().enumerate() {
                if !obj.contains(pr, pc) {
                    continue;
                }
                top = match top {
                    Some(j) if covers(state.objects[j].color, j, obj.color, i) => Some(j),
                    _ => Some(i),
                };
            }
            if let Some(i) = top {
                img.set(r, c, state.objects[i].color.rgb());
            }
        }
    }
    img
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation2D {
    /// `(row, col)` on the canvas.
    pub viewpoint: [f64; 2],
    pub patch: Image,
}

impl Observation2D {
    /// Viewpoint mapped affinely onto `[-1, 1]^2`.
    pub fn query(&self) -> [f32; 2] {
        normalize_viewpoint(self.viewpoint)
    }
}

pub fn normalize_viewpoint(v: [f64; 2]) -> [f32; 2] {
    v.map(|x| (2.0 * x / CANVAS as f64 - 1.0) as f32)
}

/// Top-left corner of the patch centered at `center`, clamped onto the canvas.
pub fn crop_origin(center: f64) -> usize {
    (center - (PATCH / 2) as f64)
        .round()
        .clamp(0.0, (CANVAS - PATCH) as f64) as usize
}

pub fn observe(canvas: &Image, viewpoint: [f64; 2]) -> Result<Observation2D> {
    let bound = canvas.height.min(canvas.width) as f64;
    if viewpoint.iter().any(|&v| !(0.0..=bound).contains(&v)) {
        return Err(CoreError::Domain(format!("viewpoint {viewpoint:?} is off the canvas")));
    }
    let (r0, c0) = (crop_origin(viewpoint[0]), crop_origin(viewpoint[1]));
    let mut patch = Image::filled(PATCH, PATCH, 0.0);
    for r in 0..PATCH {
        let src = ((r0 + r) * canvas.width + c0) * 3;
        let dst = r * PATCH * 3;
        patch.data[dst..dst + PATCH * 3].copy_from_slice(&canvas.data[src..src + PATCH * 3]);
    }
    Ok(Observation2D { viewpoint, patch })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Regime {
    /// Context only in the first five steps.
    Prediction,
    /// Up to two context observations at every step.
    Tracking,
}

impl Regime {
    pub fn id(self) -> u8 {
        match self {
            Regime::Prediction => 0,
            Regime::Tracking => 1,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Regime::Prediction),
            1 => Ok(Regime::Tracking),
            _ => Err(CoreError::Unknown {
                kind: "regime id",
                name: id.to_string(),
            }),
        }
    }
}

impl FromStr for Regime {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "prediction" | "predict" => Ok(Regime::Prediction),
            "tracking" | "track" => Ok(Regime::Tracking),
            _ => Err(CoreError::Unknown {
                kind: "regime",
                name: s.to_string(),
            }),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Prediction => "prediction",
            Regime::Tracking => "tracking",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step2D {
    pub scene: SceneState,
    pub canvas: Image,
    pub context: Vec<Observation2D>,
    pub target: Vec<Observation2D>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode2D {
    pub regime: Regime,
    pub seed: u64,
    pub steps: Vec<Step2D>,
}

impl Episode2D {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Number of context observations at 1-based step `t`.
fn context_size<R: Rng + ?Sized>(regime: Regime, t: usize, rng: &mut R) -> usize {
    match regime {
        Regime::Prediction if t <= 5 => rng.random_range(1..=5),
        Regime::Prediction => 0,
        Regime::Tracking => rng.random_range(0..=2),
    }
}

pub fn sample_episode2d(regime: Regime, steps: usize, seed: u64) -> Result<Episode2D> {
    if steps == 0 {
        return Err(CoreError::Domain("an episode needs at least one step".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SceneConfig {
        steps,
        ..SceneConfig::default()
    };
    let mut scene = init_scene_with(&mut rng, &cfg);
    let mut out = Vec::with_capacity(steps);
    for t in 1..=steps {
        if t > 1 {
            scene = step_scene(&scene, t);
        }
        let canvas = render_canvas(&scene);
        let n = context_size(regime, t, &mut rng);
        let mut obs = Vec::with_capacity(OBSERVATIONS_PER_STEP);
        for _ in 0..OBSERVATIONS_PER_STEP {
            // f32-representable so that stored records are lossless
            let v = [
                f64::from(rng.random_range(0.0..CANVAS as f32)),
                f64::from(rng.random_range(0.0..CANVAS as f32)),
            ];
            obs.push(observe(&canvas, v)?);
        }
        let target = obs.split_off(n);
        out.push(Step2D {
            scene: scene.clone(),
            canvas,
            context: obs,
            target,
        });
    }
    Ok(Episode2D {
        regime,
        seed,
        steps: out,
    })
}

pub fn sample_episodes2d(regime: Regime, steps: usize, seeds: &[u64]) -> Result<Vec<Episode2D>> {
    parallel::map_range(seeds.len(), |i| sample_episode2d(regime, steps, seeds[i]))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn object(shape: Shape, color: Color, pos: [f64; 2], vel: [f64; 2]) -> SceneObject {
        SceneObject {
            shape,
            color,
            position: pos,
            velocity: vel,
        }
    }

    #[test]
    fn reflection_mirrors_overshoot() {
        // box edge 5 px from the right wall, moving +13: overshoot 8 is mirrored back
        let start = CENTER_MAX - 5.0;
        let s = SceneState {
            objects: [
                object(Shape::Square, Color::Red, [65.0, start], [0.0, 13.0]),
                object(Shape::Circle, Color::Blue, [40.0, 40.0], [13.0, 0.0]),
            ],
            flips: [None, None],
        };
        let n = step_scene(&s, 2);
        assert!((n.objects[0].position[1] - (CENTER_MAX - 8.0)).abs() < 1e-12);
        assert_eq!(n.objects[0].velocity[1], -13.0);
        // free motion
        assert_eq!(n.objects[1].position, [53.0, 40.0]);
        assert_eq!(n.objects[1].velocity, [13.0, 0.0]);
    }

    #[test]
    fn flip_fires_at_its_step() {
        let mut s = init_scene(4, &SceneConfig::default());
        s.objects[0].color = Color::Red;
        s.flips[0] = Some(FlipEvent {
            step: 7,
            color: Color::Magenta,
        });
        for t in 2..=20 {
            s = step_scene(&s, t);
            let want = if t >= 7 { Color::Magenta } else { Color::Red };
            assert_eq!(s.objects[0].color, want, "step {t}");
        }
    }

    #[test]
    fn observe_crop_arithmetic() {
        let mut canvas = Image::filled(CANVAS, CANVAS, 1.0);
        assert_eq!(crop_origin(65.0), 33);
        assert_eq!(crop_origin(0.0), 0);
        assert_eq!(crop_origin(130.0), CANVAS - PATCH);
        let o = observe(&canvas, [65.0, 65.0]).unwrap();
        assert!(o.patch.data.iter().all(|&v| v == 1.0));
        assert_eq!(o.query(), [0.0, 0.0]);
        canvas.set(0, 0, [0.0, 0.0, 0.0]);
        let o = observe(&canvas, [0.0, 0.0]).unwrap();
        assert_eq!(o.patch.pixel(0, 0), [0.0, 0.0, 0.0]);
        assert_eq!(o.query(), [-1.0, -1.0]);
        assert!(observe(&canvas, [-1.0, 5.0]).is_err());
        assert!(observe(&canvas, [5.0, 131.0]).is_err());
    }

    #[test]
    fn shapes_are_rasterized_inside_their_box() {
        for shape in Shape::ALL {
            let s = SceneState {
                objects: [
                    object(shape, Color::Blue, [40.0, 40.0], [0.0, 13.0]),
                    object(shape, Color::Red, [100.0, 100.0], [0.0, 13.0]),
                ],
                flips: [None, None],
            };
            let img = render_canvas(&s);
            let mut count = 0;
            for r in 0..CANVAS {
                for c in 0..CANVAS {
                    if img.pixel(r, c) == Color::Blue.rgb() {
                        count += 1;
                        assert!((21..59).contains(&r) && (21..59).contains(&c), "{shape:?} at {r},{c}");
                    }
                }
            }
            assert!(count > 300, "{shape:?} has {count} pixels");
        }
    }

    #[test]
    fn regimes_parse() {
        assert_eq!("tracking".parse::<Regime>().unwrap(), Regime::Tracking);
        assert!("other".parse::<Regime>().is_err());
        assert!(sample_episode2d(Regime::Prediction, 0, 1).is_err());
    }

    #[test]
    fn downsample_and_planar_roundtrip() {
        let canvas = render_canvas(&init_scene(3, &SceneConfig::default()));
        let small = canvas.downsample(2);
        assert_eq!((small.height, small.width), (65, 65));
        let chw = canvas.to_chw();
        assert_eq!(Image::from_chw(CANVAS, CANVAS, &chw), canvas);
    }
}
