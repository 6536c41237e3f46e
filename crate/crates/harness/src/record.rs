//! `EpisodeRecord` files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      4 bytes  "SNPE"
//! version    u16      1
//! family     u8       1 = GP regression, 2 = shapes
//! dataset    u8       task id (a=0, b=1, c=2) or regime id (prediction=0, tracking=1)
//! seed       u64
//! steps      u32
//! query_dim  u32
//! output_dim u32
//! aux_dim    u32
//! per step:
//!   n        u32
//!   queries  n * query_dim  f32
//!   outputs  n * output_dim f32
//!   context  n u8 (0/1)
//!   target   n u8 (0/1)
//!   aux      aux_dim f64
//! crc32      u32 over every preceding byte
//! ```
//!
//! GP steps list context points then target points; aux holds the kernel
//! state `(l, sigma, dl, dsigma)`. Shapes steps store viewpoints and
//! channels-last 64x64 patches; aux holds the scene, from which the canvas
//! is re-rendered on load.

use std::fs;
use std::path::Path;

use snp_core::gp::{Episode1D, KernelState, Step1D, Task};
use snp_core::shapes2d::{
    render_canvas, Color, Episode2D, FlipEvent, Image, Observation2D, Regime, SceneObject, SceneState, Shape, Step2D,
    PATCH,
};

use crate::bin::{open, Reader, Writer};
use crate::error::{HarnessError, IoContext, Result};

pub const MAGIC: [u8; 4] = *b"SNPE";
pub const VERSION: u16 = 1;
pub const EXTENSION: &str = "snpe";

const GP_AUX: usize = 4;
const SHAPES_AUX: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Gp,
    Shapes,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecordHeader {
    pub family: Family,
    pub dataset: u8,
    pub seed: u64,
    pub steps: u32,
    pub query_dim: u32,
    pub output_dim: u32,
    pub aux_dim: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecordStep {
    pub queries: Vec<f32>,
    pub outputs: Vec<f32>,
    pub context_mask: Vec<bool>,
    pub target_mask: Vec<bool>,
    pub aux: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub header: RecordHeader,
    pub steps: Vec<RecordStep>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AnyEpisode {
    Gp(Episode1D),
    Shapes(Episode2D),
}

impl AnyEpisode {
    pub fn seed(&self) -> u64 {
        match self {
            AnyEpisode::Gp(e) => e.seed,
            AnyEpisode::Shapes(e) => e.seed,
        }
    }
}

fn mask(n: usize, from: usize, to: usize) -> Vec<bool> {
    (0..n).map(|i| (from..to).contains(&i)).collect()
}

fn index_of<T: PartialEq>(all: &[T], v: &T) -> f64 {
    all.iter().position(|x| x == v).expect("listed variant") as f64
}

fn variant<T: Copy>(all: &[T], v: f64, what: &str) -> Result<T> {
    all.get(v as usize)
        .copied()
        .filter(|_| v >= 0.0 && v.fract() == 0.0)
        .ok_or_else(|| HarnessError::Format(format!("bad {what} index {v}")))
}

impl EpisodeRecord {
    pub fn from_gp(ep: &Episode1D) -> Self {
        let steps = ep
            .steps
            .iter()
            .zip(&ep.kernel_trace)
            .map(|(st, k)| {
                let (n, m) = (st.n_context(), st.n_target());
                RecordStep {
                    queries: st.context_x.iter().chain(&st.target_x).copied().collect(),
                    outputs: st.context_y.iter().chain(&st.target_y).copied().collect(),
                    context_mask: mask(n + m, 0, n),
                    target_mask: mask(n + m, n, n + m),
                    aux: vec![k.l, k.sigma, k.dl, k.dsigma],
                }
            })
            .collect::<Vec<_>>();
        Self {
            header: RecordHeader {
                family: Family::Gp,
                dataset: ep.task.id(),
                seed: ep.seed,
                steps: steps.len() as u32,
                query_dim: 1,
                output_dim: 1,
                aux_dim: GP_AUX as u32,
            },
            steps,
        }
    }

    pub fn from_shapes(ep: &Episode2D) -> Self {
        let steps = ep
            .steps
            .iter()
            .map(|st| {
                let obs: Vec<&Observation2D> = st.context.iter().chain(&st.target).collect();
                let (n, total) = (st.context.len(), obs.len());
                let mut aux = Vec::with_capacity(SHAPES_AUX);
                for o in &st.scene.objects {
                    aux.extend([
                        index_of(&Shape::ALL, &o.shape),
                        index_of(&Color::ALL, &o.color),
                        o.position[0],
                        o.position[1],
                        o.velocity[0],
                        o.velocity[1],
                    ]);
                }
                for f in &st.scene.flips {
                    match f {
                        Some(f) => aux.extend([f.step as f64, index_of(&Color::ALL, &f.color)]),
                        None => aux.extend([-1.0, -1.0]),
                    }
                }
                RecordStep {
                    queries: obs.iter().flat_map(|o| o.viewpoint.map(|v| v as f32)).collect(),
                    outputs: obs.iter().flat_map(|o| o.patch.data.iter().copied()).collect(),
                    context_mask: mask(total, 0, n),
                    target_mask: mask(total, n, total),
                    aux,
                }
            })
            .collect::<Vec<_>>();
        Self {
            header: RecordHeader {
                family: Family::Shapes,
                dataset: ep.regime.id(),
                seed: ep.seed,
                steps: steps.len() as u32,
                query_dim: 2,
                output_dim: (PATCH * PATCH * 3) as u32,
                aux_dim: SHAPES_AUX as u32,
            },
            steps,
        }
    }

    pub fn from_episode(ep: &AnyEpisode) -> Self {
        match ep {
            AnyEpisode::Gp(e) => Self::from_gp(e),
            AnyEpisode::Shapes(e) => Self::from_shapes(e),
        }
    }

    fn split<'a, T>(&self, st: &'a RecordStep, values: &'a [T], dim: usize) -> Result<(Vec<&'a [T]>, Vec<&'a [T]>)> {
        let (mut ctx, mut tgt) = (Vec::new(), Vec::new());
        for (i, chunk) in values.chunks_exact(dim.max(1)).enumerate() {
            match (st.context_mask[i], st.target_mask[i]) {
                (true, false) => ctx.push(chunk),
                (false, true) => tgt.push(chunk),
                _ => {
                    return Err(HarnessError::Format(format!(
                        "point {i} must be exactly one of context or target"
                    )))
                }
            }
        }
        Ok((ctx, tgt))
    }

    pub fn to_episode(&self) -> Result<AnyEpisode> {
        let h = &self.header;
        match h.family {
            Family::Gp => {
                let task = Task::from_id(h.dataset)?;
                let mut steps = Vec::with_capacity(self.steps.len());
                let mut trace = Vec::with_capacity(self.steps.len());
                for st in &self.steps {
                    let (cx, tx) = self.split(st, &st.queries, 1)?;
                    let (cy, ty) = self.split(st, &st.outputs, 1)?;
                    let flat = |v: Vec<&[f32]>| v.into_iter().map(|c| c[0]).collect::<Vec<_>>();
                    steps.push(Step1D {
                        context_x: flat(cx),
                        context_y: flat(cy),
                        target_x: flat(tx),
                        target_y: flat(ty),
                    });
                    trace.push(KernelState {
                        l: st.aux[0],
                        sigma: st.aux[1],
                        dl: st.aux[2],
                        dsigma: st.aux[3],
                    });
                }
                Ok(AnyEpisode::Gp(Episode1D {
                    task,
                    seed: h.seed,
                    steps,
                    kernel_trace: trace,
                }))
            }
            Family::Shapes => {
                let regime = Regime::from_id(h.dataset)?;
                let mut steps = Vec::with_capacity(self.steps.len());
                for st in &self.steps {
                    let a = &st.aux;
                    let object = |o: &[f64]| -> Result<SceneObject> {
                        Ok(SceneObject {
                            shape: variant(&Shape::ALL, o[0], "shape")?,
                            color: variant(&Color::ALL, o[1], "color")?,
                            position: [o[2], o[3]],
                            velocity: [o[4], o[5]],
                        })
                    };
                    let flip = |f: &[f64]| -> Result<Option<FlipEvent>> {
                        if f[0] < 0.0 {
                            return Ok(None);
                        }
                        Ok(Some(FlipEvent {
                            step: f[0] as usize,
                            color: variant(&Color::ALL, f[1], "color")?,
                        }))
                    };
                    let scene = SceneState {
                        objects: [object(&a[0..6])?, object(&a[6..12])?],
                        flips: [flip(&a[12..14])?, flip(&a[14..16])?],
                    };
                    let (cq, tq) = self.split(st, &st.queries, 2)?;
                    let (co, to) = self.split(st, &st.outputs, PATCH * PATCH * 3)?;
                    let obs = |q: Vec<&[f32]>, o: Vec<&[f32]>| -> Vec<Observation2D> {
                        q.into_iter()
                            .zip(o)
                            .map(|(q, o)| Observation2D {
                                viewpoint: [f64::from(q[0]), f64::from(q[1])],
                                patch: Image {
                                    height: PATCH,
                                    width: PATCH,
                                    data: o.to_vec(),
                                },
                            })
                            .collect()
                    };
                    steps.push(Step2D {
                        canvas: render_canvas(&scene),
                        scene,
                        context: obs(cq, co),
                        target: obs(tq, to),
                    });
                }
                Ok(AnyEpisode::Shapes(Episode2D {
                    regime,
                    seed: h.seed,
                    steps,
                }))
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut w = Writer::default();
        w.bytes(&MAGIC);
        w.u16(VERSION);
        w.u8(match h.family {
            Family::Gp => 1,
            Family::Shapes => 2,
        });
        w.u8(h.dataset);
        w.u64(h.seed);
        w.u32(h.steps);
        w.u32(h.query_dim);
        w.u32(h.output_dim);
        w.u32(h.aux_dim);
        for st in &self.steps {
            w.u32(st.context_mask.len() as u32);
            w.f32s(&st.queries);
            w.f32s(&st.outputs);
            for m in st.context_mask.iter().chain(&st.target_mask) {
                w.u8(u8::from(*m));
            }
            w.f64s(&st.aux);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = open(bytes, &MAGIC, VERSION)?;
        let family = match r.u8()? {
            1 => Family::Gp,
            2 => Family::Shapes,
            f => return Err(HarnessError::Format(format!("unknown family {f}"))),
        };
        let header = RecordHeader {
            family,
            dataset: r.u8()?,
            seed: r.u64()?,
            steps: r.u32()?,
            query_dim: r.u32()?,
            output_dim: r.u32()?,
            aux_dim: r.u32()?,
        };
        let expected = match family {
            Family::Gp => (1, 1, GP_AUX),
            Family::Shapes => (2, PATCH * PATCH * 3, SHAPES_AUX),
        };
        let found = (header.query_dim as usize, header.output_dim as usize, header.aux_dim as usize);
        if found != expected {
            return Err(HarnessError::Format(format!("dims {found:?} do not match the family, expected {expected:?}")));
        }
        let mut steps = Vec::new();
        for _ in 0..header.steps {
            steps.push(read_step(&mut r, &header)?);
        }
        if !r.finished() {
            return Err(HarnessError::Format("trailing bytes after the last step".into()));
        }
        Ok(Self { header, steps })
    }
}

fn read_step(r: &mut Reader<'_>, h: &RecordHeader) -> Result<RecordStep> {
    let n = r.u32()? as usize;
    let queries = r.f32s(n * h.query_dim as usize)?;
    let outputs = r.f32s(n * h.output_dim as usize)?;
    let flags = r.take(2 * n)?;
    if flags.iter().any(|&b| b > 1) {
        return Err(HarnessError::Format("mask bytes must be 0 or 1".into()));
    }
    Ok(RecordStep {
        queries,
        outputs,
        context_mask: flags[..n].iter().map(|&b| b == 1).collect(),
        target_mask: flags[n..].iter().map(|&b| b == 1).collect(),
        aux: r.f64s(h.aux_dim as usize)?,
    })
}

pub fn serialize_episode(ep: &AnyEpisode, path: &Path) -> Result<()> {
    fs::write(path, EpisodeRecord::from_episode(ep).to_bytes()).at(path)
}

pub fn deserialize_episode(path: &Path) -> Result<AnyEpisode> {
    EpisodeRecord::from_bytes(&fs::read(path).at(path)?)?.to_episode()
}

/// Every `*.snpe` file under `dir`, sorted by name.
pub fn load_dir(dir: &Path) -> Result<Vec<AnyEpisode>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .at(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == EXTENSION))
        .collect();
    paths.sort();
    paths.iter().map(|p| deserialize_episode(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use snp_core::gp::sample_episode;
    use snp_core::shapes2d::sample_episode2d;

    #[test]
    fn gp_roundtrip_is_exact() {
        let ep = AnyEpisode::Gp(sample_episode(Task::C, 4).unwrap());
        let rec = EpisodeRecord::from_episode(&ep);
        let back = EpisodeRecord::from_bytes(&rec.to_bytes()).unwrap();
        assert_eq!(back, rec);
        assert_eq!(back.to_episode().unwrap(), ep);
    }

    #[test]
    fn shapes_roundtrip_is_exact() {
        let ep = AnyEpisode::Shapes(sample_episode2d(Regime::Tracking, 4, 2).unwrap());
        let bytes = EpisodeRecord::from_episode(&ep).to_bytes();
        let back = EpisodeRecord::from_bytes(&bytes).unwrap().to_episode().unwrap();
        assert_eq!(back, ep);
    }

    #[test]
    fn rejects_bad_magic_future_version_and_corruption() {
        let ep = AnyEpisode::Gp(sample_episode(Task::A, 1).unwrap());
        let bytes = EpisodeRecord::from_episode(&ep).to_bytes();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(EpisodeRecord::from_bytes(&bad), Err(HarnessError::Format(_))));

        let mut future = bytes.clone();
        future[4..6].copy_from_slice(&(VERSION + 1).to_le_bytes());
        assert!(matches!(
            EpisodeRecord::from_bytes(&future),
            Err(HarnessError::Version { found, .. }) if found == VERSION + 1
        ));

        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(matches!(EpisodeRecord::from_bytes(&flipped), Err(HarnessError::Checksum { .. })));

        let cut = &bytes[..bytes.len() - 9];
        assert!(EpisodeRecord::from_bytes(cut).is_err());
    }

    #[test]
    fn truncated_body_with_valid_checksum_is_reported() {
        let ep = AnyEpisode::Gp(sample_episode(Task::B, 3).unwrap());
        let bytes = EpisodeRecord::from_episode(&ep).to_bytes();
        let mut body = bytes[..bytes.len() - 4 - 40].to_vec();
        let crc = crc32fast::hash(&body);
        body.extend(crc.to_le_bytes());
        assert!(matches!(EpisodeRecord::from_bytes(&body), Err(HarnessError::Truncated { .. })));
    }
}
