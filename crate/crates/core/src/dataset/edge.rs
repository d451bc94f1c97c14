use crate::plane::Plane;

/// Band radius used for the edge target.
pub const BAND_RADIUS: usize = 5;

/// Mask pixels with a 4-neighbour outside the mask; out-of-frame counts as
/// background.
pub fn boundary(mask: &Plane<bool>) -> Plane<bool> {
    let (w, h) = mask.dims();
    Plane::from_fn(w, h, |x, y| {
        if !mask.get(x, y) {
            return false;
        }
        x == 0
            || y == 0
            || x + 1 == w
            || y + 1 == h
            || !mask.get(x - 1, y)
            || !mask.get(x + 1, y)
            || !mask.get(x, y - 1)
            || !mask.get(x, y + 1)
    })
}

/// Pixels whose Euclidean distance to the mask boundary is at most `radius`:
/// a disk stamped on every boundary pixel.
pub fn make_edge_target(mask: &Plane<bool>, radius: usize) -> Plane<bool> {
    let (w, h) = mask.dims();
    let contour = boundary(mask);
    let r = radius as isize;
    let r2 = r * r;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .filter(|(dx, dy)| dx * dx + dy * dy <= r2)
        .collect();
    let mut band = Plane::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            if !contour.get(x, y) {
                continue;
            }
            for &(dx, dy) in &offsets {
                let (bx, by) = (x as isize + dx, y as isize + dy);
                if bx >= 0 && by >= 0 && (bx as usize) < w && (by as usize) < h {
                    band.set(bx as usize, by as usize, true);
                }
            }
        }
    }
    band
}
