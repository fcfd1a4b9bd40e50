//! Pure image builders behind the browser bindings. Every image is RGBA8,
//! row-major, one pixel per matrix entry.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relattn::attn::{compute_scaling_s, relational_cross_weights, AttnConfig};
use relattn::layout::{parse_spec, Branch, LayoutSpec};
use relattn::masks::{build_csam, build_mcam};
use relattn::r2pe::assign_positions;
use relattn::tensor::Tensor2;
use relattn::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgba: Vec<u8>,
}

impl Image {
    fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut rgba = Vec::with_capacity(width * height * 4);
        for r in 0..height {
            for c in 0..width {
                rgba.extend(f(r, c));
                rgba.push(255);
            }
        }
        Self { width, height, rgba }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 4] {
        let i = (row * self.width + col) * 4;
        self.rgba[i..i + 4].try_into().unwrap()
    }
}

const BLOCKED: [u8; 3] = [24, 26, 32];
const VIDEO: [u8; 3] = [235, 235, 235];
const PALETTE: [[u8; 3]; 8] = [
    [230, 159, 0],
    [86, 180, 233],
    [0, 158, 115],
    [240, 228, 66],
    [0, 114, 178],
    [213, 94, 0],
    [204, 121, 167],
    [150, 150, 150],
];

/// Colour of a branch: video light grey, each condition branch its own hue.
pub fn branch_color(spec: &LayoutSpec, branch: Branch) -> [u8; 3] {
    match branch {
        Branch::Video => VIDEO,
        Branch::Standalone(e) => PALETTE[e % PALETTE.len()],
        Branch::Group(g) => PALETTE[(spec.n_standalone() + g) % PALETTE.len()],
    }
}

/// Self-attention mask: admissible pairs painted with the query's branch colour.
pub fn csam_image(spec: &LayoutSpec) -> Image {
    let csam = build_csam(spec);
    let n = spec.n_tokens();
    let colors: Vec<[u8; 3]> = (0..n)
        .map(|q| branch_color(spec, spec.branch_of(q).expect("in range")))
        .collect();
    Image::from_fn(n, n, |q, k| if csam.get(q, k) { colors[q] } else { BLOCKED })
}

/// Cross-attention levels: −1 red, 0 dark, +1 green.
pub fn mcam_image(spec: &LayoutSpec) -> Image {
    let mcam = build_mcam(spec);
    Image::from_fn(spec.text_len(), spec.n_tokens(), |v, t| match mcam.get(v, t) {
        -1 => [214, 60, 60],
        1 => [70, 190, 90],
        _ => BLOCKED,
    })
}

/// Rotary triples as a flat `[i, j, k, i, j, k, ...]` list.
pub fn position_triples(spec: &LayoutSpec) -> Vec<u32> {
    assign_positions(spec)
        .into_iter()
        .flat_map(|p| [p.i, p.j, p.k])
        .collect()
}

/// Sequential colour ramp for `x ∈ [0, 1]`.
pub fn heat(x: f32) -> [u8; 3] {
    let x = x.clamp(0.0, 1.0);
    let r = (255.0 * (1.5 * x).min(1.0)) as u8;
    let g = (255.0 * (1.5 * x - 0.5).clamp(0.0, 1.0)) as u8;
    let b = (255.0 * (3.0 * x - 2.0).clamp(0.0, 1.0).max(0.35 * (1.0 - 3.0 * x).max(0.0))) as u8;
    [r, g, b]
}

/// Relational cross-attention weights for seeded random queries and text
/// keys. Each row is scaled by its own maximum so small rows stay visible.
pub fn cross_weights(spec: &LayoutSpec, seed: u64, r: f32, d: usize, head_dim: usize) -> Result<Tensor2> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = Tensor2::randn(spec.n_tokens(), head_dim, 1.0, &mut rng);
    let k = Tensor2::randn(spec.text_len(), head_dim, 1.0, &mut rng);
    let cfg = AttnConfig::new(head_dim).with_r(r).with_d(d);
    let s = compute_scaling_s(&q, &k, spec, d)?;
    relational_cross_weights(&q, &k, &build_mcam(spec), &s, &cfg)
}

pub fn cross_image(spec: &LayoutSpec, seed: u64, r: f32, d: usize, head_dim: usize) -> Result<Image> {
    let w = cross_weights(spec, seed, r, d, head_dim)?;
    let row_max: Vec<f32> = (0..w.rows())
        .map(|v| w.row(v).iter().copied().fold(f32::MIN_POSITIVE, f32::max))
        .collect();
    Ok(Image::from_fn(w.cols(), w.rows(), |v, t| heat(w.get(v, t) / row_max[v])))
}

pub fn parse(layout_json: &str) -> Result<LayoutSpec> {
    parse_spec(layout_json)
}
