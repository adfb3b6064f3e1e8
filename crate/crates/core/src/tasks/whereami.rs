//! "Where am I": objects with glyph ids on a `k×k` grid. Each object sees
//! the 3×3 window around itself; one anchor object also knows its absolute
//! position. The task is to recover every object's position.

use pmp_autodiff::Tensor;
use rand::seq::IndexedRandom;
use rand::Rng;

use super::{GraphInstance, TEST, TRAIN, VAL};
use crate::error::{PmpError, Result};
use crate::graph::GraphTopology;

/// Rejected draws tolerated before generation gives up.
pub const MAX_ATTEMPTS: usize = 20_000;

const OFFSETS: [(i64, i64); 9] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (0, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WhereAmIParams {
    pub grid: usize,
    pub objects: usize,
    pub glyphs: usize,
}

impl Default for WhereAmIParams {
    fn default() -> Self {
        Self {
            grid: 6,
            objects: 9,
            glyphs: 4,
        }
    }
}

impl WhereAmIParams {
    pub fn n_classes(&self) -> usize {
        self.grid * self.grid
    }

    pub fn feature_dim(&self) -> usize {
        9 * (self.glyphs + 1) + 1 + 2 * self.grid
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WhereAmIInstance {
    pub params: WhereAmIParams,
    /// `(x, y)` of each object.
    pub positions: Vec<(usize, usize)>,
    /// Glyph id in `1..=glyphs` of each object; `0` marks an empty cell.
    pub glyphs: Vec<usize>,
    /// Row-major 3×3 window of glyph ids around each object. Cells off the
    /// grid read as empty.
    pub contexts: Vec<[usize; 9]>,
    pub anchor: usize,
}

impl WhereAmIInstance {
    pub fn targets(&self) -> Vec<usize> {
        let k = self.params.grid;
        self.positions.iter().map(|&(x, y)| y * k + x).collect()
    }

    /// Context one-hots, anchor flag, then one-hot `x` and `y` for the
    /// anchor only.
    pub fn features(&self) -> Tensor<f32> {
        let p = self.params;
        let g1 = p.glyphs + 1;
        let df = p.feature_dim();
        let mut out = Tensor::zeros(p.objects, df);
        for (i, ctx) in self.contexts.iter().enumerate() {
            for (c, &glyph) in ctx.iter().enumerate() {
                out.set(i, c * g1 + glyph, 1.0);
            }
        }
        let (ax, ay) = self.positions[self.anchor];
        let base = 9 * g1;
        out.set(self.anchor, base, 1.0);
        out.set(self.anchor, base + 1 + ax, 1.0);
        out.set(self.anchor, base + 1 + p.grid + ay, 1.0);
        out
    }

    /// Fully connected graph over objects; every object except the anchor
    /// is scored.
    pub fn to_graph(&self) -> Result<GraphInstance> {
        let n = self.params.objects;
        let topology = if n >= 2 {
            GraphTopology::fully_connected(n)?
        } else {
            GraphTopology::new(n, Vec::new())?
        };
        let flags = (0..n)
            .map(|i| {
                if i == self.anchor {
                    0
                } else {
                    TRAIN | VAL | TEST
                }
            })
            .collect();
        Ok(GraphInstance {
            features: self.features(),
            topology,
            targets: self.targets(),
            flags,
            n_classes: self.params.n_classes(),
        })
    }

    /// Places objects outward from the anchor, one at a time, whenever a
    /// single grid cell is consistent with everything the placed objects'
    /// windows reveal. Returns the positions found (`None` for objects it
    /// could not pin down).
    pub fn propagate(&self) -> Vec<Option<(usize, usize)>> {
        let k = self.params.grid as i64;
        let n = self.params.objects;
        let mut placed: Vec<Option<(usize, usize)>> = vec![None; n];
        placed[self.anchor] = Some(self.positions[self.anchor]);
        // Known cell contents, -1 = unknown.
        let mut known = vec![-1i64; (k * k) as usize];
        let reveal = |known: &mut Vec<i64>, (x, y): (usize, usize), ctx: &[usize; 9]| {
            for (c, &(dx, dy)) in OFFSETS.iter().enumerate() {
                let (cx, cy) = (x as i64 + dx, y as i64 + dy);
                if (0..k).contains(&cx) && (0..k).contains(&cy) {
                    known[(cy * k + cx) as usize] = ctx[c] as i64;
                }
            }
        };
        reveal(
            &mut known,
            self.positions[self.anchor],
            &self.contexts[self.anchor],
        );
        loop {
            let mut progress = false;
            for b in 0..n {
                if placed[b].is_some() {
                    continue;
                }
                let mut candidates = Vec::new();
                for y in 0..k {
                    for x in 0..k {
                        if self.consistent(b, x, y, &known, &placed) {
                            candidates.push((x as usize, y as usize));
                        }
                    }
                }
                if let [only] = candidates[..] {
                    placed[b] = Some(only);
                    reveal(&mut known, only, &self.contexts[b]);
                    progress = true;
                }
            }
            if !progress {
                return placed;
            }
        }
    }

    fn consistent(
        &self,
        b: usize,
        x: i64,
        y: i64,
        known: &[i64],
        placed: &[Option<(usize, usize)>],
    ) -> bool {
        let k = self.params.grid as i64;
        let occupied = placed
            .iter()
            .flatten()
            .any(|&(px, py)| px as i64 == x && py as i64 == y);
        if occupied {
            return false;
        }
        // Must lie in some placed object's window, otherwise nothing pins it.
        let seen = placed
            .iter()
            .flatten()
            .any(|&(px, py)| (px as i64 - x).abs() <= 1 && (py as i64 - y).abs() <= 1);
        if !seen {
            return false;
        }
        let ctx = &self.contexts[b];
        OFFSETS.iter().enumerate().all(|(c, &(dx, dy))| {
            let (cx, cy) = (x + dx, y + dy);
            if !(0..k).contains(&cx) || !(0..k).contains(&cy) {
                return ctx[c] == 0;
            }
            let cell = known[(cy * k + cx) as usize];
            cell < 0 || cell == ctx[c] as i64
        })
    }

    pub fn is_solvable(&self) -> bool {
        self.propagate().iter().all(Option::is_some)
    }
}

fn draw(params: WhereAmIParams, rng: &mut impl Rng) -> WhereAmIInstance {
    let k = params.grid;
    let mut grid = vec![0usize; k * k];
    let mut positions = Vec::with_capacity(params.objects);
    let mut glyphs = Vec::with_capacity(params.objects);
    for i in 0..params.objects {
        let pos = if i == 0 {
            (rng.random_range(0..k), rng.random_range(0..k))
        } else {
            // Grow next to an existing object so windows overlap.
            let mut frontier: Vec<(usize, usize)> = Vec::new();
            for y in 0..k {
                for x in 0..k {
                    let free = grid[y * k + x] == 0;
                    let near = positions.iter().any(|&(px, py): &(usize, usize)| {
                        px.abs_diff(x) <= 1 && py.abs_diff(y) <= 1
                    });
                    if free && near {
                        frontier.push((x, y));
                    }
                }
            }
            *frontier.choose(rng).expect("grid has room")
        };
        let glyph = rng.random_range(1..=params.glyphs);
        grid[pos.1 * k + pos.0] = glyph;
        positions.push(pos);
        glyphs.push(glyph);
    }
    let contexts = positions
        .iter()
        .map(|&(x, y)| {
            let mut ctx = [0usize; 9];
            for (c, &(dx, dy)) in OFFSETS.iter().enumerate() {
                let (cx, cy) = (x as i64 + dx, y as i64 + dy);
                if (0..k as i64).contains(&cx) && (0..k as i64).contains(&cy) {
                    ctx[c] = grid[cy as usize * k + cx as usize];
                }
            }
            ctx
        })
        .collect();
    let anchor = rng.random_range(0..params.objects);
    WhereAmIInstance {
        params,
        positions,
        glyphs,
        contexts,
        anchor,
    }
}

/// Draws instances until one is solvable by [`WhereAmIInstance::propagate`].
pub fn gen_where_am_i(params: WhereAmIParams, rng: &mut impl Rng) -> Result<WhereAmIInstance> {
    if params.grid == 0 || params.objects == 0 || params.objects > params.grid * params.grid {
        return Err(PmpError::InvalidArgument(format!(
            "need 1 ≤ objects ≤ grid², got {} objects on a {}×{} grid",
            params.objects, params.grid, params.grid
        )));
    }
    if params.glyphs < 2 {
        return Err(PmpError::InvalidArgument(
            "need at least 2 glyph types".into(),
        ));
    }
    for _ in 0..MAX_ATTEMPTS {
        let inst = draw(params, rng);
        if inst.is_solvable() {
            return Ok(inst);
        }
    }
    Err(PmpError::GenerationBudget {
        attempts: MAX_ATTEMPTS,
        hint: "try more glyph types or fewer objects".into(),
    })
}
