use super::{templates, Category, ObjectSpec, WorldError, CHANNELS, IMAGE_SIZE, PIXEL_BYTES};
use crate::numerics::{Rng, SeedStream};

/// Side of one glyph cell; glyphs align with the encoder's patch grid.
pub const GLYPH: usize = 8;
const CELLS: usize = IMAGE_SIZE / GLYPH;
const BACKGROUND: u8 = 128;
const NOISE: i32 = 8;

const SHAPES: [[&str; GLYPH]; 12] = [
    // water_bottle
    [
        "...##...", "..####..", "..#..#..", "..#..#..", "..####..", "..####..", "..####..",
        "..####..",
    ],
    // computer_mouse
    [
        "..####..", ".##..##.", ".#.##.#.", ".######.", ".######.", ".######.", "..####..",
        "........",
    ],
    // pineapple
    [
        ".#.##.#.", "..####..", "...##...", "..####..", ".#.##.#.", ".##..##.", ".#.##.#.",
        "..####..",
    ],
    // dog
    [
        "#.....#.", "##...##.", ".#####..", ".#.#.#..", ".#####..", "..###...", ".##.##..",
        ".#...#..",
    ],
    // cat
    [
        "#......#", "##....##", "########", "#.#..#.#", "########", ".######.", "..#..#..",
        "..#..#..",
    ],
    // dishwasher
    [
        "########", "#......#", "########", "#.#.#.##", "#......#", "#.#.#.##", "#......#",
        "########",
    ],
    // food_plate
    [
        "........", "..####..", ".#....#.", "#.#..#.#", "#..##..#", ".#....#.", "..####..",
        "........",
    ],
    // living_room
    [
        "........", "#......#", "#......#", "########", "########", "#......#", "#......#",
        "........",
    ],
    // landmark
    [
        "...##...", "...##...", "..####..", "..#..#..", ".######.", ".#....#.", "########",
        "#......#",
    ],
    // letter_doc
    [
        "########", "##....##", "#.#..#.#", "#..##..#", "#......#", "#......#", "########",
        "........",
    ],
    // apple
    [
        "....#...", "...#....", ".##.##..", "#######.", "#######.", "#######.", ".#####..",
        "..#.#...",
    ],
    // banana
    [
        "......#.", ".....##.", ".....##.", "....##..", "...###..", ".####...", "###.....",
        "........",
    ],
];

/// The 8×8 occupancy mask of a category's glyph.
pub fn glyph(category: Category) -> [[bool; GLYPH]; GLYPH] {
    let mut out = [[false; GLYPH]; GLYPH];
    for (r, line) in SHAPES[category.index()].iter().enumerate() {
        for (c, ch) in line.bytes().enumerate() {
            out[r][c] = ch == b'#';
        }
    }
    out
}

/// Draws `objects` on a gray background with mild per-pixel noise. The first
/// object lands in one of the two upper glyph rows, the second in one of the
/// two lower rows; each repeats its glyph `count` times side by side.
pub fn render(objects: &[ObjectSpec], seed: u64) -> Result<Vec<u8>, WorldError> {
    if objects.is_empty() || objects.len() > 2 {
        return Err(WorldError::InvalidObject(format!(
            "a scene holds 1 or 2 objects, got {}",
            objects.len()
        )));
    }
    let mut rng = Rng::new(seed, SeedStream::Custom(77));
    let mut px = vec![BACKGROUND; PIXEL_BYTES];
    for (slot, o) in objects.iter().enumerate() {
        o.check()?;
        let band = 2 * slot + rng.below(2);
        let count = usize::from(o.count);
        let start = rng.below(CELLS - count + 1);
        let mask = glyph(o.category);
        let rgb = templates().color(o.color).rgb;
        for cell in start..start + count {
            for (r, row) in mask.iter().enumerate() {
                for (c, &on) in row.iter().enumerate() {
                    if on {
                        let at = ((band * GLYPH + r) * IMAGE_SIZE + cell * GLYPH + c) * CHANNELS;
                        px[at..at + CHANNELS].copy_from_slice(&rgb);
                    }
                }
            }
        }
    }
    for p in &mut px {
        let jitter = rng.below((2 * NOISE + 1) as usize) as i32 - NOISE;
        *p = (i32::from(*p) + jitter).clamp(0, 255) as u8;
    }
    Ok(px)
}
