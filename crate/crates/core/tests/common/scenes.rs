//! Constructed curation scenes whose correct verdicts follow from how they
//! are built: rectangles and discs on a 256×256 canvas with inverse depth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selfrecon::curation::{DropReason, InstanceMeta, Mask, SceneRecord, Verdict};
use selfrecon::image::Image;

pub const SIZE: usize = 256;
pub const DENIED: &str = "person";
const BACKGROUND_DEPTH: f64 = 0.1;

pub struct Constructed {
    pub record: SceneRecord,
    pub expected: Vec<Verdict>,
}

struct Builder {
    id: String,
    depth: Vec<f64>,
    image: Image,
    instances: Vec<(InstanceMeta, Mask)>,
    expected: Vec<Verdict>,
}

fn rect(x0: usize, y0: usize, x1: usize, y1: usize) -> Mask {
    Mask::from_fn(SIZE, SIZE, |x, y| (x0..x1).contains(&x) && (y0..y1).contains(&y))
}

fn disc(cx: f64, cy: f64, r: f64) -> Mask {
    Mask::from_fn(SIZE, SIZE, |x, y| (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2) <= r * r)
}

impl Builder {
    fn new(id: String) -> Self {
        Builder {
            id,
            depth: vec![BACKGROUND_DEPTH; SIZE * SIZE],
            image: Image::filled(SIZE, SIZE, [0.8, 0.8, 0.75]),
            instances: Vec::new(),
            expected: Vec::new(),
        }
    }

    /// Paints `mask` at `depth` over whatever is already there.
    fn add(&mut self, mask: Mask, depth: f64, confidence: f64, category: Option<&str>, expected: Verdict) {
        let k = self.instances.len() as f64;
        for (i, &b) in mask.bits.iter().enumerate() {
            if b {
                self.depth[i] = depth;
                let (x, y) = (i % SIZE, i / SIZE);
                self.image.set(x, y, [0.2 + 0.15 * k, 0.4, 0.9 - 0.2 * k]);
            }
        }
        let bbox = mask.bbox().map_or([0; 4], |(x0, y0, x1, y1)| [x0, y0, x1 - x0 + 1, y1 - y0 + 1]);
        let id = format!("obj{}", self.instances.len());
        let meta = InstanceMeta { id, confidence, category: category.map(String::from), bbox };
        self.instances.push((meta, mask));
        self.expected.push(expected);
    }

    /// Removes `cover` from every instance painted so far.
    fn occlude_existing(&mut self, cover: &Mask) {
        for (_, m) in &mut self.instances {
            *m = m.and_not(cover);
        }
    }

    fn finish(self) -> Constructed {
        Constructed {
            record: SceneRecord { id: self.id, image: self.image, depth: self.depth, instances: self.instances },
            expected: self.expected,
        }
    }
}

pub const KINDS: usize = 10;

/// Scene `index`; the kind cycles through [`KINDS`] constructions.
pub fn scene(index: usize) -> Constructed {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5ce7e + index as u64);
    let kind = index % KINDS;
    let mut b = Builder::new(format!("scene_{index:03}_k{kind}"));
    let keep = Verdict::Keep;
    let drop = Verdict::Drop;
    let conf = |rng: &mut ChaCha8Rng| rng.random_range(0.5..1.0);
    let big_rect = |rng: &mut ChaCha8Rng| {
        let (w, h) = (rng.random_range(110..170), rng.random_range(110..170));
        let x0 = rng.random_range(20..SIZE - 20 - w);
        let y0 = rng.random_range(20..SIZE - 20 - h);
        rect(x0, y0, x0 + w, y0 + h)
    };
    match kind {
        0 => {
            let m = big_rect(&mut rng);
            let c = conf(&mut rng);
            b.add(m, 0.6, c, None, keep);
        }
        1 => {
            let r = rng.random_range(56.0..80.0);
            let cx = rng.random_range(r + 20.0..SIZE as f64 - r - 20.0);
            let cy = rng.random_range(r + 20.0..SIZE as f64 - r - 20.0);
            let c = conf(&mut rng);
            b.add(disc(cx, cy, r), 0.7, c, Some("chair"), keep);
        }
        2 => {
            let m = big_rect(&mut rng);
            let c = rng.random_range(0.0..0.29);
            b.add(m, 0.6, c, None, drop(DropReason::LowConfidence));
        }
        3 => {
            let (w, h) = (rng.random_range(20..95), rng.random_range(20..95));
            let (x0, y0) = (rng.random_range(30..120), rng.random_range(30..120));
            let c = conf(&mut rng);
            b.add(rect(x0, y0, x0 + w, y0 + h), 0.6, c, None, drop(DropReason::Small));
        }
        4 => {
            let (w, h) = (rng.random_range(110..160), rng.random_range(110..160));
            let gap = rng.random_range(0..10);
            let y0 = rng.random_range(20..SIZE - 20 - h);
            let m = if rng.random_bool(0.5) {
                rect(gap, y0, gap + w, y0 + h)
            } else {
                rect(SIZE - gap - w, y0, SIZE - gap, y0 + h)
            };
            let c = conf(&mut rng);
            b.add(m, 0.6, c, None, drop(DropReason::Truncated));
        }
        5 => {
            // a denied and an allowed object, far apart
            let h1 = rng.random_range(110..200);
            let h2 = rng.random_range(110..200);
            let y1 = rng.random_range(15..SIZE - 15 - h1);
            let y2 = rng.random_range(15..SIZE - 15 - h2);
            let (c1, c2) = (conf(&mut rng), conf(&mut rng));
            b.add(rect(12, y1, 114, y1 + h1), 0.6, c1, Some(DENIED), drop(DropReason::Category));
            b.add(rect(142, y2, 244, y2 + h2), 0.6, c2, Some("chair"), keep);
        }
        6 => {
            // a nearer box covers the right part of a farther one over its full height
            let (by0, by1) = (rng.random_range(40..70), rng.random_range(180..215));
            let bx0 = rng.random_range(15..30);
            let cut = bx0 + rng.random_range(110..130);
            let fx1 = (cut + rng.random_range(100..120)).min(SIZE - 15);
            let back = rect(bx0, by0, cut + 40, by1);
            let front = rect(cut, by0 - 20, fx1, by1 + 20);
            let (c1, c2) = (conf(&mut rng), conf(&mut rng));
            b.add(back, rng.random_range(0.3..0.5), c1, None, drop(DropReason::Occluded));
            b.occlude_existing(&front);
            b.add(front, rng.random_range(0.8..1.0), c2, None, keep);
        }
        7 => {
            // a nearer disc bites into a farther box
            let (x0, y0) = (rng.random_range(15..20), rng.random_range(40..50));
            let (x1, y1) = (x0 + rng.random_range(110..125), y0 + rng.random_range(150..170));
            let r = rng.random_range(55.0..65.0);
            let cx = x1 as f64 + rng.random_range(0.0..10.0);
            let cy = 0.5 * (y0 + y1) as f64;
            let (c1, c2) = (conf(&mut rng), conf(&mut rng));
            b.add(rect(x0, y0, x1, y1), 0.4, c1, None, drop(DropReason::Occluded));
            let front = disc(cx, cy, r);
            b.occlude_existing(&front);
            b.add(front, 0.9, c2, None, keep);
        }
        8 => {
            // side by side, touching; equal depth keeps both, otherwise the farther one is occluded
            let split = rng.random_range(118..138);
            let (y0, y1) = (rng.random_range(40..70), rng.random_range(180..215));
            let left = rect(15, y0, split, y1);
            let right = rect(split, y0 + rng.random_range(0..20), SIZE - 15, y1 - rng.random_range(0..20));
            let (c1, c2) = (conf(&mut rng), conf(&mut rng));
            match rng.random_range(0..3) {
                0 => {
                    b.add(left, 0.6, c1, None, keep);
                    b.add(right, 0.6, c2, None, keep);
                }
                1 => {
                    b.add(left, 0.9, c1, None, keep);
                    b.add(right, 0.35, c2, None, drop(DropReason::Occluded));
                }
                _ => {
                    b.add(left, 0.35, c1, None, drop(DropReason::Occluded));
                    b.add(right, 0.9, c2, None, keep);
                }
            }
        }
        _ => {
            // a two-pixel-wide pole next to a box: the pole has no usable normal
            let (x0, y0) = (rng.random_range(20..40), rng.random_range(40..60));
            let (x1, y1) = (x0 + rng.random_range(110..140), y0 + rng.random_range(120..150));
            let px = x1 + rng.random_range(3..8);
            let (c1, c2) = (conf(&mut rng), conf(&mut rng));
            b.add(rect(x0, y0, x1, y1), 0.6, c1, None, keep);
            b.add(rect(px, y0, px + 2, y1), 0.6, c2, None, drop(DropReason::DegenerateBoundary));
        }
    }
    b.finish()
}

pub fn scenes(n: usize) -> Vec<Constructed> {
    (0..n).map(scene).collect()
}
