//! Synthetic triplet images with planted objects.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::embedder::ToyImage;
use super::mask::Rect;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Solid,
    Checker,
    Stripes,
}

impl std::str::FromStr for Pattern {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "solid" => Ok(Pattern::Solid),
            "checker" => Ok(Pattern::Checker),
            "stripes" => Ok(Pattern::Stripes),
            other => Err(Error::InvalidParam(format!("unknown pattern '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSetConfig {
    pub seed: u64,
    pub triplets: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub images_per_product: usize,
    pub patterns: Vec<Pattern>,
    /// Object side length range, as a fraction of the image side.
    pub min_object: f64,
    pub max_object: f64,
    pub background_noise: f64,
    /// Per-pixel noise on the object's own colours.
    pub object_noise: f64,
}

impl Default for ImageSetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            triplets: 200,
            height: 32,
            width: 32,
            channels: 3,
            images_per_product: 3,
            patterns: vec![Pattern::Solid, Pattern::Checker, Pattern::Stripes],
            min_object: 0.35,
            max_object: 0.6,
            background_noise: 0.05,
            object_noise: 0.0,
        }
    }
}

/// Images grouped by product plus `(query, positive, negative)` index triplets.
///
/// Query and positive show the same product on different backgrounds; the
/// negative shows a different product.
#[derive(Clone, Debug)]
pub struct TripletImageSet {
    pub images: Vec<ToyImage>,
    pub product_of: Vec<usize>,
    pub triplets: Vec<[usize; 3]>,
}

struct Product {
    pattern: Pattern,
    primary: Vec<f64>,
    secondary: Vec<f64>,
}

fn random_color(rng: &mut ChaCha8Rng, channels: usize) -> Vec<f64> {
    (0..channels).map(|_| rng.gen_range(0.0..1.0)).collect()
}

fn render(
    cfg: &ImageSetConfig,
    product: &Product,
    rng: &mut ChaCha8Rng,
) -> Result<ToyImage> {
    let (h, w, ch) = (cfg.height, cfg.width, cfg.channels);
    let side_w = rng.gen_range(cfg.min_object..=cfg.max_object);
    let side_h = rng.gen_range(cfg.min_object..=cfg.max_object);
    let x_l = rng.gen_range(0.0..=1.0 - side_w);
    let y_t = rng.gen_range(0.0..=1.0 - side_h);
    let truth = Rect::new(x_l, x_l + side_w, y_t, y_t + side_h)?;

    let background = random_color(rng, ch);
    let noise = Normal::new(0.0, cfg.background_noise.max(1e-12)).expect("positive sigma");
    let texture = Normal::new(0.0, cfg.object_noise.max(1e-12)).expect("positive sigma");
    let mut data = Vec::with_capacity(h * w * ch);
    for r in 0..h {
        let y = (r as f64 + 0.5) / h as f64;
        for c in 0..w {
            let x = (c as f64 + 0.5) / w as f64;
            let inside = x >= truth.x_l && x < truth.x_r && y >= truth.y_t && y < truth.y_b;
            if inside {
                let alt = match product.pattern {
                    Pattern::Solid => false,
                    Pattern::Checker => (r / 2 + c / 2) % 2 == 1,
                    Pattern::Stripes => (r / 2) % 2 == 1,
                };
                let color = if alt { &product.secondary } else { &product.primary };
                for v in color {
                    data.push((v + texture.sample(rng)).clamp(0.0, 1.0));
                }
            } else {
                for b in &background {
                    data.push((b + noise.sample(rng)).clamp(0.0, 1.0));
                }
            }
        }
    }
    let mut image = ToyImage::new(h, w, ch, data)?;
    image.truth = Some(truth);
    Ok(image)
}

/// Generates a seeded triplet image set.
pub fn generate(cfg: &ImageSetConfig) -> Result<TripletImageSet> {
    if cfg.triplets == 0 || cfg.images_per_product < 2 || cfg.patterns.is_empty() {
        return Err(Error::InvalidParam(
            "need >= 1 triplet, >= 2 images per product and >= 1 pattern".into(),
        ));
    }
    if !(0.0 < cfg.min_object && cfg.min_object <= cfg.max_object && cfg.max_object < 1.0) {
        return Err(Error::InvalidParam("object size range must lie in (0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let product_count = cfg.triplets.div_ceil(2).max(2);
    let products: Vec<Product> = (0..product_count)
        .map(|p| Product {
            pattern: cfg.patterns[p % cfg.patterns.len()],
            primary: random_color(&mut rng, cfg.channels),
            secondary: random_color(&mut rng, cfg.channels),
        })
        .collect();

    let mut images = Vec::with_capacity(product_count * cfg.images_per_product);
    let mut product_of = Vec::with_capacity(images.capacity());
    for (p, product) in products.iter().enumerate() {
        for _ in 0..cfg.images_per_product {
            images.push(render(cfg, product, &mut rng)?);
            product_of.push(p);
        }
    }

    let per = cfg.images_per_product;
    let mut triplets = Vec::with_capacity(cfg.triplets);
    for t in 0..cfg.triplets {
        let p = t % product_count;
        let mut own: Vec<usize> = (p * per..(p + 1) * per).collect();
        own.shuffle(&mut rng);
        let mut other = rng.gen_range(0..product_count - 1);
        if other >= p {
            other += 1;
        }
        let neg = other * per + rng.gen_range(0..per);
        triplets.push([own[0], own[1], neg]);
    }
    Ok(TripletImageSet {
        images,
        product_of,
        triplets,
    })
}
