//! Procedural face-track dataset.
//!
//! Every video shows one or two drifting, textured face ellipses over a
//! smooth background. In fake videos one face has its inner region blended
//! toward a blurred donor face with a visible seam; the blend strength
//! `s_t` and the donor colour vary from frame to frame. With `s_t → 0` a
//! fake frame equals the real frame it was made from.
//!
//! Label-independent nuisances make some patches uninformative: spurious
//! boxes on background, blurred frames, and a second (always pristine)
//! face.
//!
//! Class sizes: `fake = round(n / (1 + real_ratio))`, `real = n − fake`.
//! Splits are stratified per class: `round(f_train·k)` train,
//! `round(f_val·k)` val, the rest test.

use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::geometry::sample_frames;
use super::manifest::{BBox, FrameEntry, Label, Manifest, Split, VideoRecord};
use crate::error::{CoreError, Result};
use crate::seed::rng_for;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NuisanceConfig {
    /// Chance that a frame carries an extra box on background.
    pub false_positive_rate: f64,
    /// Chance that a frame is heavily blurred.
    pub blur_rate: f64,
    /// Chance that a video shows a second face.
    pub two_face_rate: f64,
    /// Std of the per-frame detector box error, pixels.
    pub box_jitter: f64,
    /// Std of the per-pixel sensor noise, 8-bit units.
    pub noise: f64,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        NuisanceConfig { false_positive_rate: 0.15, blur_rate: 0.15, two_face_rate: 0.3, box_jitter: 1.5, noise: 3.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_videos: usize,
    pub frames_per_video: usize,
    /// Real videos per fake video.
    pub real_ratio: f64,
    pub frame_side: u32,
    /// Nominal rendered face height in pixels.
    pub face_side: u32,
    /// Mean manipulation strength in `(0, 1]`.
    pub strength: f64,
    /// Relative std of the per-frame manipulation strength.
    pub flicker: f64,
    /// Std of the per-frame donor colour shift, 8-bit units.
    pub color_jitter: f64,
    pub seed: u64,
    /// Only every `stride`-th frame is rendered.
    pub stride: usize,
    /// Test videos also get the frames within this distance of each
    /// rendered frame (for temporal test-time augmentation).
    pub neighbor_radius: usize,
    /// Train and validation fractions; the test split takes the rest.
    pub split_fractions: [f64; 2],
    pub nuisance: NuisanceConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_videos: 200,
            frames_per_video: 300,
            real_ratio: 0.28,
            frame_side: 128,
            face_side: 40,
            strength: 0.6,
            flicker: 0.5,
            color_jitter: 12.0,
            seed: 0,
            stride: 10,
            neighbor_radius: 2,
            split_fractions: [0.6, 0.2],
            nuisance: NuisanceConfig::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::config(m.to_string()));
        if self.num_videos == 0 || self.frames_per_video == 0 || self.stride == 0 {
            return bad("video count, frame count and stride must be positive");
        }
        if !(self.real_ratio > 0.0) || !self.real_ratio.is_finite() {
            return bad("real_ratio must be positive");
        }
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            return bad("strength must lie in (0, 1]");
        }
        if self.face_side < 8 || self.frame_side < 2 * self.face_side + 8 {
            return bad("frame_side must leave room for two faces of face_side");
        }
        let [a, b] = self.split_fractions;
        if !(a > 0.0 && b >= 0.0 && a + b <= 1.0) {
            return bad("split fractions must be non-negative and sum to at most 1");
        }
        let n = &self.nuisance;
        for p in [n.false_positive_rate, n.blur_rate, n.two_face_rate] {
            if !(0.0..=1.0).contains(&p) {
                return bad("nuisance rates must lie in [0, 1]");
            }
        }
        if [self.flicker, self.color_jitter, n.box_jitter, n.noise].iter().any(|v| !(*v >= 0.0)) {
            return bad("jitter and noise levels must be non-negative");
        }
        Ok(())
    }

    /// `(fake, real)` video counts.
    pub fn class_counts(&self) -> (usize, usize) {
        let fake = (self.num_videos as f64 / (1.0 + self.real_ratio)).round() as usize;
        let fake = fake.min(self.num_videos);
        (fake, self.num_videos - fake)
    }
}

/// Assigns labels and stratified splits; index `i` is video `v{i:04}`.
pub fn plan_videos(cfg: &GeneratorConfig) -> Vec<(Label, Split)> {
    let (fake, real) = cfg.class_counts();
    let mut labels: Vec<Label> = std::iter::repeat_n(Label::Fake, fake).chain(std::iter::repeat_n(Label::Real, real)).collect();
    labels.shuffle(&mut rng_for(cfg.seed, "labels"));
    let mut plan: Vec<(Label, Split)> = labels.iter().map(|&l| (l, Split::Test)).collect();
    for class in [Label::Fake, Label::Real] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng_for(cfg.seed, &format!("splits/{class:?}")));
        let k = members.len() as f64;
        let n_train = (cfg.split_fractions[0] * k).round() as usize;
        let n_val = ((cfg.split_fractions[1] * k).round() as usize).min(members.len() - n_train.min(members.len()));
        for (rank, &i) in members.iter().enumerate() {
            plan[i].1 = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    plan
}

pub fn video_id(i: usize) -> String {
    format!("v{i:04}")
}

/// Writes frames under `out/frames/<video>/` and `out/manifest.jsonl`.
pub fn generate_synthetic_dataset(cfg: &GeneratorConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| CoreError::io(p, e));
    mkdir(out)?;
    let mut records = Vec::with_capacity(cfg.num_videos);
    for (i, (label, split)) in plan_videos(cfg).into_iter().enumerate() {
        let id = video_id(i);
        let rel_dir = PathBuf::from("frames").join(&id);
        mkdir(&out.join(&rel_dir))?;
        let video = SyntheticVideo::new(cfg, i, label);
        let mut frames = Vec::new();
        for t in rendered_frames(cfg, split) {
            let (image, boxes) = video.render(t, cfg.strength);
            let rel = rel_dir.join(format!("{t:04}.png"));
            let path = out.join(&rel);
            image.save(&path).map_err(|source| CoreError::Image { path: path.clone(), source })?;
            frames.push(FrameEntry { frame_index: t, image: rel.to_string_lossy().replace('\\', "/"), boxes });
        }
        records.push(VideoRecord { video_id: id, label, split, total_frames: cfg.frames_per_video, frames });
    }
    let manifest = Manifest::new(out, records)?;
    let path = out.join(MANIFEST_FILE);
    let header = format!("# generator {}\n", serde_json::to_string(cfg).expect("config serializes"));
    std::fs::write(&path, header + &manifest.to_text()).map_err(|e| CoreError::io(&path, e))?;
    Ok(manifest)
}

/// Frame indices written for a video of the given split.
pub fn rendered_frames(cfg: &GeneratorConfig, split: Split) -> Vec<usize> {
    let sampled = sample_frames(cfg.frames_per_video, cfg.stride);
    if split != Split::Test || cfg.neighbor_radius == 0 {
        return sampled;
    }
    let r = cfg.neighbor_radius as i64;
    let last = cfg.frames_per_video as i64 - 1;
    let mut all: Vec<usize> = sampled.iter().flat_map(|&f| (-r..=r).map(move |o| (f as i64 + o).clamp(0, last) as usize)).collect();
    all.sort_unstable();
    all.dedup();
    all
}

// Seam ring width (normalized radius), depth (grey levels at full strength)
// and box-blur radius applied to the pasted face.
const SEAM_WIDTH: f32 = 0.12;
const SEAM_DEPTH: f32 = 100.0;
const DONOR_BLUR: usize = 2;

#[derive(Clone, Debug)]
struct Identity {
    skin: [f32; 3],
    waves: [(f32, f32, f32, f32); 3],
    eye: [f32; 3],
    mouth: [f32; 3],
    eye_dx: f32,
    eye_dy: f32,
    aspect: f32,
}

impl Identity {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut wave = || {
            (
                rng.random_range(1.0..4.0f32),
                rng.random_range(1.0..4.0f32),
                rng.random_range(0.0..std::f32::consts::TAU),
                rng.random_range(3.0..10.0f32),
            )
        };
        let waves = [wave(), wave(), wave()];
        Identity {
            skin: [rng.random_range(150.0..230.0), rng.random_range(100.0..180.0), rng.random_range(80.0..150.0)],
            waves,
            eye: [rng.random_range(20.0..70.0), rng.random_range(20.0..60.0), rng.random_range(20.0..60.0)],
            mouth: [rng.random_range(120.0..180.0), rng.random_range(40.0..80.0), rng.random_range(40.0..80.0)],
            eye_dx: rng.random_range(0.3..0.42),
            eye_dy: rng.random_range(-0.3..-0.15),
            aspect: rng.random_range(0.78..0.9),
        }
    }

    /// Colour at normalized face coordinates (`u` across, `v` down, the
    /// face ellipse being `u² + v² ≤ 1`).
    fn color(&self, u: f32, v: f32) -> [f32; 3] {
        let r2 = u * u + v * v;
        let shade = 1.0 - 0.25 * r2;
        let tex: f32 = self.waves.iter().map(|&(a, b, p, amp)| amp * (a * u * 3.0 + b * v * 3.0 + p).sin()).sum();
        let mut c = self.skin.map(|s| s * shade + tex);
        let eye = |cx: f32| {
            let (du, dv) = ((u - cx) / 0.14, (v - self.eye_dy) / 0.09);
            du * du + dv * dv
        };
        if eye(-self.eye_dx) < 1.0 || eye(self.eye_dx) < 1.0 {
            c = self.eye;
        }
        let (mu, mv) = (u / 0.32, (v - 0.45) / 0.07);
        if mu * mu + mv * mv < 1.0 {
            c = self.mouth;
        }
        c
    }
}

/// Face image in a local square of side `2·half+1` around its centre.
#[derive(Clone, Debug)]
struct Sprite {
    half: i32,
    rgb: Vec<[f32; 3]>,
    alpha: Vec<f32>,
    /// Manipulation mask and seam intensity (fake face only).
    mask: Vec<f32>,
    seam: Vec<f32>,
    donor: Vec<[f32; 3]>,
}

impl Sprite {
    fn new(host: &Identity, donor: Option<&Identity>, height: f32) -> Sprite {
        let ry = height / 2.0;
        let rx = ry * host.aspect;
        let half = ry.ceil() as i32 + 1;
        let side = (2 * half + 1) as usize;
        let mut s = Sprite {
            half,
            rgb: vec![[0.0; 3]; side * side],
            alpha: vec![0.0; side * side],
            mask: vec![0.0; side * side],
            seam: vec![0.0; side * side],
            donor: vec![[0.0; 3]; side * side],
        };
        for j in 0..side {
            for i in 0..side {
                let (u, v) = ((i as f32 - half as f32) / rx, (j as f32 - half as f32) / ry);
                let k = j * side + i;
                let rho = (u * u + v * v).sqrt();
                s.alpha[k] = ((1.0 - rho) * ry).clamp(0.0, 1.0);
                s.rgb[k] = host.color(u, v);
                if let Some(d) = donor {
                    let (mu, mv) = (u / 0.66, (v - 0.05) / 0.76);
                    let m = (mu * mu + mv * mv).sqrt();
                    s.mask[k] = ((1.0 - m) / 0.06).clamp(0.0, 1.0);
                    s.seam[k] = (-((m - 1.0) / SEAM_WIDTH).powi(2)).exp();
                    s.donor[k] = d.color(u, v);
                }
            }
        }
        if donor.is_some() {
            s.donor = box_blur(&s.donor, side, side, DONOR_BLUR);
        }
        s
    }

    fn side(&self) -> usize {
        (2 * self.half + 1) as usize
    }
}

fn box_blur(src: &[[f32; 3]], w: usize, h: usize, r: usize) -> Vec<[f32; 3]> {
    let pass = |src: &[[f32; 3]], horizontal: bool| -> Vec<[f32; 3]> {
        let mut out = vec![[0.0; 3]; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f32; 3];
                let mut n = 0.0;
                for d in -(r as i64)..=(r as i64) {
                    let (xx, yy) = if horizontal { (x as i64 + d, y as i64) } else { (x as i64, y as i64 + d) };
                    if xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64 {
                        continue;
                    }
                    let p = src[yy as usize * w + xx as usize];
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                    n += 1.0;
                }
                out[y * w + x] = acc.map(|a| a / n);
            }
        }
        out
    };
    let tmp = pass(src, true);
    pass(&tmp, false)
}

#[derive(Clone, Debug)]
struct Face {
    sprite: Sprite,
    center: (f32, f32),
    amp: (f32, f32),
    period: f32,
    phase: f32,
    fake: bool,
}

impl Face {
    fn center_at(&self, t: usize) -> (i32, i32) {
        let a = std::f32::consts::TAU * t as f32 / self.period + self.phase;
        ((self.center.0 + self.amp.0 * a.sin()).round() as i32, (self.center.1 + self.amp.1 * a.cos()).round() as i32)
    }
}

/// Two colours, gradient direction and a (freq, phase, amp) wave.
type Background = ([f32; 3], [f32; 3], (f32, f32), (f32, f32, f32));

/// Everything about one video that does not change between frames.
#[derive(Clone, Debug)]
pub struct SyntheticVideo {
    index: usize,
    seed: u64,
    side: u32,
    face_side: f32,
    flicker: f64,
    color_jitter: f64,
    nuisance: NuisanceConfig,
    background: Background,
    faces: Vec<Face>,
}

impl SyntheticVideo {
    pub fn new(cfg: &GeneratorConfig, index: usize, label: Label) -> Self {
        let mut scene = rng_for(cfg.seed, &format!("video/{index}/scene"));
        let mut fake_rng = rng_for(cfg.seed, &format!("video/{index}/fake"));
        let side = cfg.frame_side as f32;
        let color = |rng: &mut ChaCha8Rng| [0; 3].map(|_| rng.random_range(30.0..220.0f32));
        let c1 = color(&mut scene);
        let c2 = color(&mut scene);
        let dir = scene.random_range(0.0..std::f32::consts::TAU);
        let wave = (scene.random_range(0.02..0.08f32), scene.random_range(0.0..std::f32::consts::TAU), scene.random_range(5.0..20.0f32));
        let two = scene.random_bool(cfg.nuisance.two_face_rate);
        let fs = cfg.face_side as f32;
        let count = if two { 2 } else { 1 };
        let manipulated = if label.is_fake() { Some(fake_rng.random_range(0..count)) } else { None };
        let mut faces = Vec::new();
        for k in 0..count {
            let host = Identity::random(&mut scene);
            let height = fs * scene.random_range(0.9..1.1f32);
            let cx = if two {
                let lane = side * (0.28 + 0.44 * k as f32);
                lane + scene.random_range(-3.0..3.0f32)
            } else {
                side / 2.0 + scene.random_range(-10.0..10.0f32)
            };
            let cy = side / 2.0 + scene.random_range(-10.0..10.0f32);
            let amp = (scene.random_range(0.0..5.0f32), scene.random_range(0.0..4.0f32));
            let period = scene.random_range(60.0..300.0f32);
            let phase = scene.random_range(0.0..std::f32::consts::TAU);
            let donor = (manipulated == Some(k)).then(|| Identity::random(&mut fake_rng));
            faces.push(Face {
                sprite: Sprite::new(&host, donor.as_ref(), height),
                center: (cx, cy),
                amp,
                period,
                phase,
                fake: donor.is_some(),
            });
        }
        SyntheticVideo {
            index,
            seed: cfg.seed,
            side: cfg.frame_side,
            face_side: fs,
            flicker: cfg.flicker,
            color_jitter: cfg.color_jitter,
            nuisance: cfg.nuisance.clone(),
            background: (c1, c2, (dir.cos(), dir.sin()), wave),
            faces,
        }
    }

    /// Renders frame `t` with mean manipulation strength `strength`;
    /// returns the image and the detector boxes.
    pub fn render(&self, t: usize, strength: f64) -> (RgbImage, Vec<BBox>) {
        let mut frame_rng = rng_for(self.seed, &format!("video/{}/frame/{t}", self.index));
        let mut fake_rng = rng_for(self.seed, &format!("video/{}/fake-frame/{t}", self.index));
        let n = self.side as usize;
        let (c1, c2, (dx, dy), (freq, phase, amp)) = self.background;
        let gain = 1.0 + frame_rng.random_range(-0.04..0.04f32);
        let mut px = vec![[0.0f32; 3]; n * n];
        for y in 0..n {
            for x in 0..n {
                let s = ((x as f32 * dx + y as f32 * dy) / n as f32 + 1.0) / 2.0;
                let w = amp * (freq * (x as f32 + y as f32 * 0.7) + phase + 0.01 * t as f32).sin();
                px[y * n + x] = [0, 1, 2].map(|c| c1[c] * (1.0 - s) + c2[c] * s + w);
            }
        }
        let s_t = (strength * (1.0 + self.flicker * Normal::new(0.0, 1.0).unwrap().sample(&mut fake_rng)).max(0.0)) as f32;
        let shift: [f32; 3] = [0; 3].map(|_| (self.color_jitter * Normal::new(0.0, 1.0).unwrap().sample(&mut fake_rng)) as f32);
        let mut boxes = Vec::new();
        for face in &self.faces {
            let (cx, cy) = face.center_at(t);
            let sp = &face.sprite;
            let side = sp.side() as i32;
            for j in 0..side {
                for i in 0..side {
                    let (x, y) = (cx - sp.half + i, cy - sp.half + j);
                    if x < 0 || y < 0 || x >= n as i32 || y >= n as i32 {
                        continue;
                    }
                    let k = (j * side + i) as usize;
                    let a = sp.alpha[k];
                    if a <= 0.0 {
                        continue;
                    }
                    let mut c = sp.rgb[k];
                    if face.fake {
                        for ch in 0..3 {
                            let d = sp.donor[k][ch] + shift[ch] - c[ch];
                            c[ch] += s_t * (sp.mask[k] * d - sp.seam[k] * SEAM_DEPTH);
                        }
                    }
                    let dst = &mut px[y as usize * n + x as usize];
                    for ch in 0..3 {
                        dst[ch] = dst[ch] * (1.0 - a) + c[ch] * a;
                    }
                }
            }
            let (hw, hh) = (sp.half as f64 * 0.9, sp.half as f64);
            let jit = Normal::new(0.0, self.nuisance.box_jitter.max(1e-12)).unwrap();
            let mut j = || if self.nuisance.box_jitter > 0.0 { jit.sample(&mut frame_rng) } else { 0.0 };
            let (bx, by) = (cx as f64 - hw + j(), cy as f64 - hh + j());
            let (bw, bh) = ((2.0 * hw + j()).max(4.0), (2.0 * hh + j()).max(4.0));
            boxes.push(BBox::new(bx.round(), by.round(), bw.round(), bh.round()));
        }
        if frame_rng.random_bool(self.nuisance.false_positive_rate) {
            let s = (self.face_side * frame_rng.random_range(0.8..1.1f32)).round() as f64;
            let lim = n as f64 - s;
            boxes.push(BBox::new(frame_rng.random_range(0.0..lim).round(), frame_rng.random_range(0.0..lim).round(), s, s));
        }
        if frame_rng.random_bool(self.nuisance.blur_rate) {
            px = box_blur(&px, n, n, 3);
        }
        for v in px.iter_mut() {
            for c in v.iter_mut() {
                *c *= gain;
            }
        }
        let noise = Normal::new(0.0, self.nuisance.noise.max(1e-12)).unwrap();
        let mut img = RgbImage::new(self.side, self.side);
        for (k, p) in img.pixels_mut().enumerate() {
            for c in 0..3 {
                let e = if self.nuisance.noise > 0.0 { noise.sample(&mut frame_rng) as f32 } else { 0.0 };
                p[c] = (px[k][c] + e).round().clamp(0.0, 255.0) as u8;
            }
        }
        (img, boxes)
    }
}
