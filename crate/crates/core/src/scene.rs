//! Synthetic compositional scene domain.
//!
//! A scene is one colored object (circle, square or triangle) placed in one
//! of three horizontal thirds over a plain or gradient background, rendered
//! at 32x32 RGB with a seed-derived noise texture. The procedural oracle
//! captioner decodes each of the four slots back from pixels.

use std::fmt;
use std::io::Write;

use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const PIXEL_COUNT: usize = IMAGE_SIZE * IMAGE_SIZE * CHANNELS;

const OBJECT_HALF: i64 = 6;
const TEXTURE_AMPLITUDE: f64 = 0.04;
const GRADIENT_SPAN: f64 = 0.6;
const OBJECT_LEVEL: f64 = 0.85;

const MASK_SPREAD: f64 = 0.8;
const MIN_OBJECT_PIXELS: usize = 10;
const TRIANGLE_ASYMMETRY: f64 = 0.08;
const SQUARE_FILL: f64 = 0.86;
const GRADIENT_VARIANCE: f64 = 0.04;

pub const NO_OBJECT_CAPTION: &str = "no salient object";

macro_rules! slot_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self {
                    $($name::$variant => $word),+
                }
            }

            pub fn from_word(word: &str) -> Option<Self> {
                match word {
                    $($word => Some($name::$variant),)+
                    _ => None,
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }
    };
}

slot_enum!(Color { Red => "red", Green => "green", Blue => "blue", Yellow => "yellow" });
slot_enum!(Shape { Circle => "circle", Square => "square", Triangle => "triangle" });
slot_enum!(Position { Left => "left", Center => "center", Right => "right" });
slot_enum!(Background { Plain => "plain", Gradient => "gradient" });

impl Color {
    fn rgb(self) -> [f64; 3] {
        let (hi, lo) = (OBJECT_LEVEL, -OBJECT_LEVEL);
        match self {
            Color::Red => [hi, lo, lo],
            Color::Green => [lo, hi, lo],
            Color::Blue => [lo, lo, hi],
            Color::Yellow => [hi, hi, lo],
        }
    }
}

impl Position {
    fn center_x(self) -> i64 {
        match self {
            Position::Left => 7,
            Position::Center => 16,
            Position::Right => 25,
        }
    }
}

/// The four semantic slots, in caption order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Color,
    Shape,
    Position,
    Background,
}

impl Slot {
    pub const ALL: [Slot; 4] = [Slot::Color, Slot::Shape, Slot::Position, Slot::Background];

    pub fn name(self) -> &'static str {
        match self {
            Slot::Color => "color",
            Slot::Shape => "shape",
            Slot::Position => "position",
            Slot::Background => "background",
        }
    }

    /// Legal words for this slot, in declaration order.
    pub fn values(self) -> Vec<&'static str> {
        match self {
            Slot::Color => Color::ALL.iter().map(|v| v.word()).collect(),
            Slot::Shape => Shape::ALL.iter().map(|v| v.word()).collect(),
            Slot::Position => Position::ALL.iter().map(|v| v.word()).collect(),
            Slot::Background => Background::ALL.iter().map(|v| v.word()).collect(),
        }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One value of one slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SlotValue {
    Color(Color),
    Shape(Shape),
    Position(Position),
    Background(Background),
}

impl SlotValue {
    pub fn slot(self) -> Slot {
        match self {
            SlotValue::Color(_) => Slot::Color,
            SlotValue::Shape(_) => Slot::Shape,
            SlotValue::Position(_) => Slot::Position,
            SlotValue::Background(_) => Slot::Background,
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            SlotValue::Color(v) => v.word(),
            SlotValue::Shape(v) => v.word(),
            SlotValue::Position(v) => v.word(),
            SlotValue::Background(v) => v.word(),
        }
    }

    /// Keyword lookup shared by the utterance grammar and caption decoding.
    pub fn from_word(word: &str) -> Option<Self> {
        let word = match word {
            "middle" | "centre" | "centered" | "central" => "center",
            other => other,
        };
        Color::from_word(word)
            .map(SlotValue::Color)
            .or_else(|| Shape::from_word(word).map(SlotValue::Shape))
            .or_else(|| Position::from_word(word).map(SlotValue::Position))
            .or_else(|| Background::from_word(word).map(SlotValue::Background))
    }
}

/// Fully specified ground-truth scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: Shape,
    pub color: Color,
    pub position: Position,
    pub background: Background,
}

impl SceneSpec {
    /// All 72 scenes of the domain.
    pub fn all() -> Vec<SceneSpec> {
        let mut out = Vec::with_capacity(72);
        for &shape in Shape::ALL {
            for &color in Color::ALL {
                for &position in Position::ALL {
                    for &background in Background::ALL {
                        out.push(SceneSpec { shape, color, position, background });
                    }
                }
            }
        }
        out
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        SceneSpec {
            shape: Shape::ALL[rng.gen_range(0..Shape::ALL.len())],
            color: Color::ALL[rng.gen_range(0..Color::ALL.len())],
            position: Position::ALL[rng.gen_range(0..Position::ALL.len())],
            background: Background::ALL[rng.gen_range(0..Background::ALL.len())],
        }
    }

    pub fn value(&self, slot: Slot) -> SlotValue {
        match slot {
            Slot::Color => SlotValue::Color(self.color),
            Slot::Shape => SlotValue::Shape(self.shape),
            Slot::Position => SlotValue::Position(self.position),
            Slot::Background => SlotValue::Background(self.background),
        }
    }
}

/// Scene description in which any slot may be unspecified.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PartialSceneSpec {
    pub shape: Option<Shape>,
    pub color: Option<Color>,
    pub position: Option<Position>,
    pub background: Option<Background>,
}

impl PartialSceneSpec {
    pub fn is_empty(&self) -> bool {
        self.shape.is_none() && self.color.is_none() && self.position.is_none() && self.background.is_none()
    }

    pub fn get(&self, slot: Slot) -> Option<SlotValue> {
        match slot {
            Slot::Color => self.color.map(SlotValue::Color),
            Slot::Shape => self.shape.map(SlotValue::Shape),
            Slot::Position => self.position.map(SlotValue::Position),
            Slot::Background => self.background.map(SlotValue::Background),
        }
    }

    pub fn set(&mut self, value: SlotValue) {
        match value {
            SlotValue::Color(v) => self.color = Some(v),
            SlotValue::Shape(v) => self.shape = Some(v),
            SlotValue::Position(v) => self.position = Some(v),
            SlotValue::Background(v) => self.background = Some(v),
        }
    }

    pub fn clear(&mut self, slot: Slot) {
        match slot {
            Slot::Color => self.color = None,
            Slot::Shape => self.shape = None,
            Slot::Position => self.position = None,
            Slot::Background => self.background = None,
        }
    }

    /// Overlay `other` on `self`; slots specified in `other` win.
    pub fn merged_with(&self, other: &PartialSceneSpec) -> PartialSceneSpec {
        PartialSceneSpec {
            shape: other.shape.or(self.shape),
            color: other.color.or(self.color),
            position: other.position.or(self.position),
            background: other.background.or(self.background),
        }
    }

    pub fn specified_slots(&self) -> Vec<Slot> {
        Slot::ALL.into_iter().filter(|s| self.get(*s).is_some()).collect()
    }

    pub fn unspecified_slots(&self) -> Vec<Slot> {
        Slot::ALL.into_iter().filter(|s| self.get(*s).is_none()).collect()
    }

    pub fn to_full(&self) -> Result<SceneSpec> {
        Ok(SceneSpec {
            shape: self.shape.ok_or(Error::UnspecifiedSlot(Slot::Shape))?,
            color: self.color.ok_or(Error::UnspecifiedSlot(Slot::Color))?,
            position: self.position.ok_or(Error::UnspecifiedSlot(Slot::Position))?,
            background: self.background.ok_or(Error::UnspecifiedSlot(Slot::Background))?,
        })
    }

    /// Every partial spec over the domain: one `None` or value per slot.
    pub fn all() -> Vec<PartialSceneSpec> {
        let mut out = Vec::new();
        let opt = |n: usize| (0..=n).map(move |i| if i == 0 { None } else { Some(i - 1) });
        for s in opt(Shape::ALL.len()) {
            for c in opt(Color::ALL.len()) {
                for p in opt(Position::ALL.len()) {
                    for b in opt(Background::ALL.len()) {
                        out.push(PartialSceneSpec {
                            shape: s.map(|i| Shape::ALL[i]),
                            color: c.map(|i| Color::ALL[i]),
                            position: p.map(|i| Position::ALL[i]),
                            background: b.map(|i| Background::ALL[i]),
                        });
                    }
                }
            }
        }
        out
    }

    /// Whether every specified slot agrees with `target`.
    pub fn consistent_with(&self, target: &SceneSpec) -> bool {
        Slot::ALL
            .into_iter()
            .all(|s| self.get(s).map_or(true, |v| v == target.value(s)))
    }
}

impl From<SceneSpec> for PartialSceneSpec {
    fn from(s: SceneSpec) -> Self {
        PartialSceneSpec {
            shape: Some(s.shape),
            color: Some(s.color),
            position: Some(s.position),
            background: Some(s.background),
        }
    }
}

/// 32x32 RGB image with values in [-1, 1], stored row-major as (y, x, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Vec<f64>,
}

impl Image {
    pub fn zeros() -> Self {
        Image { pixels: vec![0.0; PIXEL_COUNT] }
    }

    /// Wraps raw values, clamping into [-1, 1]. Non-finite values are rejected.
    pub fn from_clamped(mut pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != PIXEL_COUNT {
            return Err(Error::InvalidImage(format!(
                "expected {PIXEL_COUNT} values, got {}",
                pixels.len()
            )));
        }
        for v in pixels.iter_mut() {
            if !v.is_finite() {
                return Err(Error::InvalidImage("non-finite pixel".into()));
            }
            *v = v.clamp(-1.0, 1.0);
        }
        Ok(Image { pixels })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * IMAGE_SIZE + x) * CHANNELS + c]
    }

    /// 8-bit quantization used by PNG export.
    pub fn quantized(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| (((v + 1.0) * 0.5) * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let buf = image::RgbImage::from_raw(IMAGE_SIZE as u32, IMAGE_SIZE as u32, self.quantized())
            .ok_or_else(|| Error::Png("buffer size mismatch".into()))?;
        let mut out = std::io::Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::Png(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| Error::Png(e.to_string()))?
            .to_rgb8();
        if img.width() as usize != IMAGE_SIZE || img.height() as usize != IMAGE_SIZE {
            return Err(Error::InvalidImage(format!("expected {IMAGE_SIZE}x{IMAGE_SIZE}")));
        }
        let pixels = img.into_raw().into_iter().map(|u| u as f64 / 255.0 * 2.0 - 1.0).collect();
        Ok(Image { pixels })
    }
}

/// Draws `spec` over a seed-derived noise texture.
pub fn render(spec: &SceneSpec, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rgb = spec.color.rgb();
    let cx = spec.position.center_x();
    let cy = (IMAGE_SIZE / 2) as i64;
    let mut pixels = Vec::with_capacity(PIXEL_COUNT);
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let inside = covers(spec.shape, x as i64 - cx, y as i64 - cy);
            let bg = match spec.background {
                Background::Plain => 0.0,
                Background::Gradient => {
                    -GRADIENT_SPAN + 2.0 * GRADIENT_SPAN * x as f64 / (IMAGE_SIZE - 1) as f64
                }
            };
            for &value in &rgb {
                let base = if inside { value } else { bg };
                let noise = rng.gen_range(-TEXTURE_AMPLITUDE..=TEXTURE_AMPLITUDE);
                pixels.push((base + noise).clamp(-1.0, 1.0));
            }
        }
    }
    Image { pixels }
}

/// Renders a partial spec; fails on the first unspecified slot.
pub fn render_partial(spec: &PartialSceneSpec, seed: u64) -> Result<Image> {
    Ok(render(&spec.to_full()?, seed))
}

fn covers(shape: Shape, dx: i64, dy: i64) -> bool {
    let h = OBJECT_HALF;
    match shape {
        Shape::Circle => dx * dx + dy * dy <= h * h + 4,
        Shape::Square => dx.abs() <= h - 1 && dy.abs() <= h - 1,
        Shape::Triangle => {
            // apex up, base at dy = h
            if dy < -h || dy > h {
                return false;
            }
            2 * dx.abs() <= dy + h
        }
    }
}

/// Ordered per-slot concept phrases (color, shape, position, background).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionSet {
    pub captions: Vec<String>,
}

impl CaptionSet {
    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    pub fn caption(&self, slot: Slot) -> &str {
        &self.captions[slot as usize]
    }

    /// Reads the slot values named by the captions back out.
    pub fn decode(&self) -> PartialSceneSpec {
        let mut spec = PartialSceneSpec::default();
        for caption in &self.captions {
            for word in tokenize(caption) {
                if let Some(v) = SlotValue::from_word(&word) {
                    spec.set(v);
                }
            }
        }
        spec
    }
}

/// Per-image features extracted by the oracle, kept for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReading {
    pub spec: PartialSceneSpec,
    pub object_pixels: usize,
    pub fill: f64,
    pub asymmetry: f64,
    pub background_variance: f64,
}

/// Procedural decoder of the four slots from pixels.
pub fn oracle_read(img: &Image) -> OracleReading {
    let n = IMAGE_SIZE;
    let mut salient = vec![false; n * n];
    for y in 0..n {
        for x in 0..n {
            let px = [img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2)];
            let hi = px.iter().cloned().fold(f64::MIN, f64::max);
            let lo = px.iter().cloned().fold(f64::MAX, f64::min);
            salient[y * n + x] = hi - lo > MASK_SPREAD;
        }
    }
    let component = largest_component(&salient, n);

    let mut spec = PartialSceneSpec::default();
    let (mut fill, mut asymmetry) = (0.0, 0.0);
    if component.len() >= MIN_OBJECT_PIXELS {
        let count = component.len() as f64;
        let mut mean = [0.0; 3];
        let (mut sx, mut sy) = (0.0, 0.0);
        let (mut x0, mut x1, mut y0, mut y1) = (n, 0, n, 0);
        for &idx in &component {
            let (y, x) = (idx / n, idx % n);
            for (c, m) in mean.iter_mut().enumerate() {
                *m += img.at(y, x, c) / count;
            }
            sx += x as f64 + 0.5;
            sy += y as f64 + 0.5;
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        let (cx, cy) = (sx / count, sy / count);
        let (bw, bh) = ((x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64);
        fill = count / (bw * bh);
        asymmetry = (cy - (y0 as f64 + bh / 2.0)) / bh;

        let color = Color::ALL
            .iter()
            .copied()
            .min_by(|a, b| {
                let da = sq_dist(&a.rgb(), &mean);
                let db = sq_dist(&b.rgb(), &mean);
                da.total_cmp(&db)
            })
            .expect("non-empty palette");
        spec.color = Some(color);
        spec.shape = Some(if asymmetry > TRIANGLE_ASYMMETRY {
            Shape::Triangle
        } else if fill > SQUARE_FILL {
            Shape::Square
        } else {
            Shape::Circle
        });
        let third = n as f64 / 3.0;
        spec.position = Some(if cx < third {
            Position::Left
        } else if cx < 2.0 * third {
            Position::Center
        } else {
            Position::Right
        });
    }

    // Background: variance of per-column gray means over pixels away from any salient region.
    let mut excluded = vec![false; n * n];
    for y in 0..n {
        for x in 0..n {
            if salient[y * n + x] {
                for yy in y.saturating_sub(1)..(y + 2).min(n) {
                    for xx in x.saturating_sub(1)..(x + 2).min(n) {
                        excluded[yy * n + xx] = true;
                    }
                }
            }
        }
    }
    let mut column_means = Vec::with_capacity(n);
    for x in 0..n {
        let (mut s, mut k) = (0.0, 0usize);
        for y in 0..n {
            if !excluded[y * n + x] {
                s += (img.at(y, x, 0) + img.at(y, x, 1) + img.at(y, x, 2)) / 3.0;
                k += 1;
            }
        }
        if k > 0 {
            column_means.push(s / k as f64);
        }
    }
    let background_variance = if column_means.len() > 1 {
        let m = column_means.iter().sum::<f64>() / column_means.len() as f64;
        column_means.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / column_means.len() as f64
    } else {
        0.0
    };
    spec.background = Some(if background_variance > GRADIENT_VARIANCE {
        Background::Gradient
    } else {
        Background::Plain
    });

    OracleReading { spec, object_pixels: component.len(), fill, asymmetry, background_variance }
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn largest_component(mask: &[bool], n: usize) -> Vec<usize> {
    let mut seen = vec![false; mask.len()];
    let mut best = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        seen[start] = true;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            comp.push(idx);
            let (y, x) = (idx / n, idx % n);
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(idx - 1);
            }
            if x + 1 < n {
                visit(idx + 1);
            }
            if y > 0 {
                visit(idx - n);
            }
            if y + 1 < n {
                visit(idx + n);
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    best.sort_unstable();
    best
}

/// Four-slot caption set decoded from pixels. Never fails; images without a
/// salient object get [`NO_OBJECT_CAPTION`] for the object slots.
pub fn oracle_caption(img: &Image) -> CaptionSet {
    let reading = oracle_read(img);
    let spec = reading.spec;
    let captions = vec![
        spec.color.map_or(NO_OBJECT_CAPTION.to_string(), |c| format!("a {c} object")),
        spec.shape.map_or(NO_OBJECT_CAPTION.to_string(), |s| format!("a {s} shape")),
        spec.position.map_or(NO_OBJECT_CAPTION.to_string(), |p| format!("placed {p}")),
        spec.background.map_or(NO_OBJECT_CAPTION.to_string(), |b| format!("{b} background")),
    ];
    CaptionSet { captions }
}

/// Fraction of the four slots on which the oracle reading of `img` agrees with `target`.
pub fn match_score(target: &SceneSpec, img: &Image) -> f64 {
    let decoded = oracle_read(img).spec;
    let hits = Slot::ALL
        .into_iter()
        .filter(|s| decoded.get(*s) == Some(target.value(*s)))
        .count();
    hits as f64 / Slot::ALL.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhraseStyle {
    Terse,
    Verbose,
}

/// Template text naming exactly the specified slots.
pub fn phrase(spec: &PartialSceneSpec, style: PhraseStyle) -> Result<String> {
    if spec.is_empty() {
        return Err(Error::EmptySpec);
    }
    let noun = match (spec.color, spec.shape) {
        (Some(c), Some(s)) => format!("{c} {s}"),
        (Some(c), None) => format!("{c} object"),
        (None, Some(s)) => s.to_string(),
        (None, None) => "object".to_string(),
    };
    let text = match style {
        PhraseStyle::Terse => {
            let article = if noun.starts_with("object") { "an" } else { "a" };
            let mut text = format!("{article} {noun}");
            match spec.position {
                Some(Position::Center) => text.push_str(" in the center"),
                Some(p) => text.push_str(&format!(" on the {p}")),
                None => {}
            }
            if let Some(b) = spec.background {
                text.push_str(&format!(" with a {b} background"));
            }
            text
        }
        PhraseStyle::Verbose => {
            let mut text = format!("an image showing the {noun}");
            if let Some(p) = spec.position {
                text.push_str(&format!(" placed {p}"));
            }
            if let Some(b) = spec.background {
                text.push_str(&format!(" on a {b} background"));
            }
            text
        }
    };
    Ok(text)
}

/// Lowercased alphabetic word split.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_ascii_alphabetic())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_ascii_lowercase())
        .collect()
}

#[derive(Debug, Clone)]
pub struct DatasetRecord {
    pub prompt: String,
    pub image: Image,
    pub spec: SceneSpec,
    pub render_seed: u64,
}

/// `n` uniformly random full scenes, rendered and phrased verbosely.
pub fn sample_dataset(n: usize, seed: u64) -> Vec<DatasetRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let spec = SceneSpec::random(&mut rng);
            let render_seed = rng.gen::<u64>();
            DatasetRecord {
                prompt: phrase(&spec.into(), PhraseStyle::Verbose).expect("full spec is non-empty"),
                image: render(&spec, render_seed),
                spec,
                render_seed,
            }
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
pub struct ExportRecord {
    pub prompt: String,
    pub spec: SceneSpec,
    /// Base64-encoded PNG.
    pub image: String,
}

/// Writes one JSON object per line: `{prompt, spec, image}` with a base64 PNG.
pub fn export_dataset<W: Write>(records: &[DatasetRecord], mut out: W) -> Result<()> {
    let b64 = base64::engine::general_purpose::STANDARD;
    for r in records {
        let rec = ExportRecord {
            prompt: r.prompt.clone(),
            spec: r.spec,
            image: b64.encode(r.image.to_png()?),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn red_circle_left_plain() -> SceneSpec {
        SceneSpec {
            shape: Shape::Circle,
            color: Color::Red,
            position: Position::Left,
            background: Background::Plain,
        }
    }

    #[test]
    fn render_is_deterministic_and_in_range() {
        let s = red_circle_left_plain();
        let a = render(&s, 7);
        let b = render(&s, 7);
        assert_eq!(a.as_slice(), b.as_slice());
        let min = a.as_slice().iter().cloned().fold(f64::MAX, f64::min);
        let max = a.as_slice().iter().cloned().fold(f64::MIN, f64::max);
        assert!(min >= -1.0 && max <= 1.0);
        assert_ne!(render(&s, 8).as_slice(), a.as_slice());
    }

    #[test]
    fn partial_render_reports_unspecified_slot() {
        let p = PartialSceneSpec { color: Some(Color::Red), ..Default::default() };
        let err = render_partial(&p, 0).unwrap_err();
        assert!(err.to_string().contains("unspecified slot"), "{err}");
    }

    #[test]
    fn oracle_round_trips_every_scene() {
        for spec in SceneSpec::all() {
            for seed in [0u64, 1, 99] {
                let img = render(&spec, seed);
                let decoded = oracle_caption(&img).decode();
                assert_eq!(decoded, PartialSceneSpec::from(spec), "seed {seed}: {:?}", oracle_read(&img));
                assert_eq!(match_score(&spec, &img), 1.0);
            }
        }
    }

    #[test]
    fn oracle_caption_text() {
        let caps = oracle_caption(&render(&red_circle_left_plain(), 0));
        assert_eq!(
            caps.captions,
            vec!["a red object", "a circle shape", "placed left", "plain background"]
        );
    }

    #[test]
    fn degenerate_image_has_no_salient_object() {
        let caps = oracle_caption(&Image::zeros());
        assert_eq!(caps.len(), 4);
        assert!(caps.captions.iter().any(|c| c == NO_OBJECT_CAPTION));
        assert_eq!(caps.caption(Slot::Color), NO_OBJECT_CAPTION);
        assert_eq!(caps.caption(Slot::Shape), NO_OBJECT_CAPTION);
    }

    #[test]
    fn phrase_templates() {
        let red = PartialSceneSpec { color: Some(Color::Red), ..Default::default() };
        assert_eq!(phrase(&red, PhraseStyle::Terse).unwrap(), "a red object");
        let red_circle = PartialSceneSpec { shape: Some(Shape::Circle), ..red };
        assert_eq!(phrase(&red_circle, PhraseStyle::Terse).unwrap(), "a red circle");
        assert!(matches!(phrase(&PartialSceneSpec::default(), PhraseStyle::Verbose), Err(Error::EmptySpec)));
        assert_eq!(
            phrase(&red_circle_left_plain().into(), PhraseStyle::Verbose).unwrap(),
            "an image showing the red circle placed left on a plain background"
        );
    }

    #[test]
    fn dataset_is_seeded() {
        let a = sample_dataset(5, 3);
        let b = sample_dataset(5, 3);
        assert_eq!(a.len(), 5);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.prompt, y.prompt);
            assert_eq!(x.image, y.image);
        }
    }

    #[test]
    fn png_round_trip_preserves_quantized_pixels() {
        let img = render(&red_circle_left_plain(), 4);
        let back = Image::from_png(&img.to_png().unwrap()).unwrap();
        assert_eq!(back.quantized(), img.quantized());
        assert_eq!(oracle_caption(&back), oracle_caption(&img));
    }

    #[test]
    fn export_writes_one_line_per_record() {
        let data = sample_dataset(3, 1);
        let mut buf = Vec::new();
        export_dataset(&data, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        let rec: ExportRecord = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(rec.spec, data[0].spec);
        let png = base64::engine::general_purpose::STANDARD.decode(rec.image).unwrap();
        assert_eq!(Image::from_png(&png).unwrap().quantized(), data[0].image.quantized());
    }
}
