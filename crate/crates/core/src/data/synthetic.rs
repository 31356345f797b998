//! Procedural desk-scale person/caption corpus.
//!
//! Each identity is a unique attribute tuple: one (color, garment) pair per
//! body zone (head, torso, legs, feet). Images are deterministic
//! rasterizations of that tuple as horizontal color bands with small
//! per-image jitter; captions mention the same attributes in an order that
//! varies across templates. Everything is a pure function of
//! [`SyntheticSpec`], seed included.

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetRecord, ImageSource, Split};
use crate::error::{Error, Result};

/// Body zones, top to bottom, with their vertical extent as fractions of
/// image height.
pub const ZONES: [(&str, f64, f64); 4] = [
    ("head", 0.00, 0.25),
    ("torso", 0.25, 0.55),
    ("legs", 0.55, 0.75),
    ("feet", 0.75, 1.00),
];

/// Zone index whose attributes land in the top part band.
pub const HEAD_ZONE: usize = 0;
/// Zone index whose attributes land in the bottom part band.
pub const FEET_ZONE: usize = 3;

fn default_colors() -> Vec<(String, [u8; 3])> {
    // Deliberately small and maximally separated in RGB so that desk-scale
    // identity counts still cover every (color, garment) combination several
    // times over; a long tail of near-metamers starves the encoder instead.
    [
        ("black", [25, 25, 25]),
        ("white", [235, 235, 235]),
        ("red", [205, 35, 35]),
        ("blue", [35, 65, 205]),
        ("green", [35, 160, 60]),
        ("yellow", [220, 200, 40]),
    ]
    .into_iter()
    .map(|(n, c)| (n.to_string(), c))
    .collect()
}

fn default_garments() -> [Vec<String>; 4] {
    [
        vec!["hat".into(), "cap".into()],
        vec!["shirt".into(), "jacket".into()],
        vec!["pants".into(), "shorts".into()],
        vec!["shoes".into(), "boots".into()],
    ]
}

/// Generator parameters. Identities map to unique attribute tuples; captions
/// and pixels are deterministic functions of (tuple, indices, seed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub train_identities: usize,
    pub test_identities: usize,
    pub images_per_identity: usize,
    pub captions_per_image: usize,
    /// (height, width) in pixels.
    pub image_size: (usize, usize),
    #[serde(default = "default_colors")]
    pub colors: Vec<(String, [u8; 3])>,
    #[serde(default = "default_garments")]
    pub garments: [Vec<String>; 4],
    /// Scales the renderer's band/color/position noise (see [`RenderSpec`]).
    #[serde(default = "default_jitter_strength")]
    pub jitter_strength: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(train_identities: usize, images_per_identity: usize, seed: u64) -> Self {
        SyntheticSpec {
            train_identities,
            test_identities: (train_identities / 4).max(1),
            images_per_identity,
            captions_per_image: 2,
            image_size: (96, 32),
            colors: default_colors(),
            garments: default_garments(),
            jitter_strength: 1.0,
            seed,
        }
    }

    /// The desk-scale retrieval benchmark: 40 train / 10 test identities,
    /// 4 images each, 6 caption templates per image, 192x64 renders.
    pub fn tiny_benchmark(seed: u64) -> Self {
        let mut spec = SyntheticSpec::new(40, 4, seed);
        spec.captions_per_image = 6;
        spec.image_size = (192, 64);
        spec
    }
}

/// One zone's rendered attribute: color name + rgb, garment name + style.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZoneAttr {
    pub color: String,
    pub rgb: [u8; 3],
    pub garment: String,
    /// Render style: 0 solid band, 1 striped band, 2 narrow band.
    pub style: u8,
}

/// Self-contained rasterization spec for one image. Embedded in manifests as
/// a `synthetic:` URI so synthetic datasets stay hermetic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderSpec {
    pub height: usize,
    pub width: usize,
    pub zones: Vec<ZoneAttr>,
    /// Per-image jitter seed.
    pub jitter: u64,
    /// Scales every jitter magnitude; 0 renders the identity's canonical
    /// image, 1 is the default band/color/position noise.
    #[serde(default = "default_jitter_strength")]
    pub jitter_strength: f64,
}

fn default_jitter_strength() -> f64 {
    1.0
}

impl RenderSpec {
    pub fn example() -> Self {
        let colors = default_colors();
        let garments = default_garments();
        RenderSpec {
            height: 96,
            width: 32,
            zones: (0..4)
                .map(|z| ZoneAttr {
                    color: colors[z].0.clone(),
                    rgb: colors[z].1,
                    garment: garments[z][0].clone(),
                    style: 0,
                })
                .collect(),
            jitter: 7,
            jitter_strength: 1.0,
        }
    }

    /// Rasterize: background, then one horizontal band per zone in the zone's
    /// color, with boundary/color/position jitter derived from `jitter`.
    pub fn render(&self) -> RgbImage {
        let (h, w) = (self.height, self.width);
        let mut rng = ChaCha8Rng::seed_from_u64(self.jitter);
        let amp = |base: i64| -> i64 { (base as f64 * self.jitter_strength).round() as i64 };
        let shift: i64 = rng.gen_range(-amp(2)..=amp(2));
        let mut img = RgbImage::from_pixel(w as u32, h as u32, image::Rgb([210, 210, 215]));
        let fig_left = (w / 6) as i64 + shift;
        let fig_right = (w - w / 6) as i64 + shift;
        for (zi, zone) in self.zones.iter().enumerate() {
            let (_, top_f, bot_f) = ZONES[zi];
            let jit_top: i64 = if zi == 0 { 0 } else { rng.gen_range(-amp(2)..=amp(2)) };
            let jit_bot: i64 = if zi + 1 == self.zones.len() {
                0
            } else {
                rng.gen_range(-amp(2)..=amp(2))
            };
            let top = ((top_f * h as f64) as i64 + jit_top).clamp(0, h as i64);
            let bot = ((bot_f * h as f64) as i64 + jit_bot).clamp(0, h as i64);
            let mut rgb = zone.rgb;
            for c in rgb.iter_mut() {
                let dj: i64 = rng.gen_range(-amp(12)..=amp(12));
                *c = (*c as i64 + dj).clamp(0, 255) as u8;
            }
            let (left, right) = match zone.style {
                2 => {
                    let span = fig_right - fig_left;
                    (fig_left + span / 5, fig_right - span / 5)
                }
                _ => (fig_left, fig_right),
            };
            for y in top..bot {
                for x in left.max(0)..right.min(w as i64) {
                    let mut px = rgb;
                    if zone.style == 1 && (x - left) % 4 < 2 {
                        for c in px.iter_mut() {
                            *c = (*c as f64 * 0.72) as u8;
                        }
                    }
                    img.put_pixel(x as u32, y as u32, image::Rgb(px));
                }
            }
        }
        img
    }
}

/// Attribute tuple of one identity: (color index, garment index) per zone.
type Identity = [(usize, usize); 4];

fn sample_unique_identities(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Identity>> {
    let total = spec.train_identities + spec.test_identities;
    let combos: usize = spec
        .garments
        .iter()
        .map(|g| spec.colors.len() * g.len())
        .product();
    if combos < total {
        return Err(Error::config(format!(
            "attribute inventory supports only {combos} unique identities, {total} requested"
        )));
    }
    let mut seen = std::collections::HashSet::new();
    let mut out: Vec<Identity> = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while out.len() < total {
        attempts += 1;
        if attempts > 10_000 * total {
            return Err(Error::config(
                "could not sample distinct identities; enlarge the attribute inventory",
            ));
        }
        let tuple: Identity = [0, 1, 2, 3].map(|z| {
            (
                rng.gen_range(0..spec.colors.len()),
                rng.gen_range(0..spec.garments[z].len()),
            )
        });
        // Gallery identities (the tail of the list) must stay mutually
        // distinguishable: require them to differ from each other in at
        // least three zones so single-attribute confusions cannot decide
        // retrieval. Training identities are drawn uniformly.
        if out.len() >= spec.train_identities {
            let clash = out[spec.train_identities..].iter().any(|prev| {
                (0..4).filter(|&z| prev[z] != tuple[z]).count() < 3
            });
            if clash {
                continue;
            }
        }
        if seen.insert(tuple) {
            out.push(tuple);
        }
    }
    Ok(out)
}

fn zone_phrase(spec: &SyntheticSpec, identity: &Identity, zone: usize) -> String {
    let (color_idx, garment_idx) = identity[zone];
    format!("{} {}", spec.colors[color_idx].0, spec.garments[zone][garment_idx])
}

/// Caption for (identity tuple, template index, rng): zone phrases in a
/// shuffled order rotated by the template index, wrapped in a sentence frame.
fn caption(spec: &SyntheticSpec, identity: &Identity, template: usize, rng: &mut ChaCha8Rng) -> String {
    let mut order: Vec<usize> = (0..4).collect();
    order.shuffle(rng);
    order.rotate_left(template % 4);
    let phrases: Vec<String> = order.iter().map(|&z| zone_phrase(spec, identity, z)).collect();
    match template % 2 {
        0 => format!(
            "a person wearing a {} with a {} a {} and {}",
            phrases[0], phrases[1], phrases[2], phrases[3]
        ),
        _ => format!(
            "this person has a {} a {} a {} and a {} on",
            phrases[0], phrases[1], phrases[2], phrases[3]
        ),
    }
}

fn mix(seed: u64, a: u64, b: u64, c: u64) -> u64 {
    // splitmix64 over the combined stream id
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(c.wrapping_mul(0x94D0_49BB_1331_11EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generate a synthetic corpus with disjoint train/test identity sets.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>)> {
    if spec.train_identities < 2 || spec.test_identities < 1 {
        return Err(Error::config("need at least 2 train and 1 test identities"));
    }
    if spec.images_per_identity < 2 {
        return Err(Error::config("need at least 2 images per identity"));
    }
    if spec.captions_per_image == 0 {
        return Err(Error::config("need at least 1 caption per image"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let identities = sample_unique_identities(spec, &mut rng)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (id_idx, identity) in identities.iter().enumerate() {
        let split = if id_idx < spec.train_identities {
            Split::Train
        } else {
            Split::Test
        };
        for img_idx in 0..spec.images_per_identity {
            let zones = (0..4)
                .map(|z| {
                    let (color_idx, garment_idx) = identity[z];
                    ZoneAttr {
                        color: spec.colors[color_idx].0.clone(),
                        rgb: spec.colors[color_idx].1,
                        garment: spec.garments[z][garment_idx].clone(),
                        style: (garment_idx % 3) as u8,
                    }
                })
                .collect();
            let render = RenderSpec {
                height: spec.image_size.0,
                width: spec.image_size.1,
                zones,
                jitter: mix(spec.seed, id_idx as u64, img_idx as u64, 0),
                jitter_strength: spec.jitter_strength,
            };
            let captions = (0..spec.captions_per_image)
                .map(|cap_idx| {
                    let mut crng = ChaCha8Rng::seed_from_u64(mix(
                        spec.seed,
                        id_idx as u64,
                        img_idx as u64,
                        1 + cap_idx as u64,
                    ));
                    caption(spec, identity, cap_idx, &mut crng)
                })
                .collect();
            let rec = DatasetRecord {
                identity_id: id_idx as u32,
                image: ImageSource::Synthetic(render),
                captions,
                split,
            };
            match split {
                Split::Train => train.push(rec),
                _ => test.push(rec),
            }
        }
    }
    Ok((train, test))
}
