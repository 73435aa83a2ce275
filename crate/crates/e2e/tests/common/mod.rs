use ave3_core::sim::{Point, RoomSpec};
use std::f64::consts::PI;

/// Every wall-reflection sequence of length ≤ `order` that never hits the same
/// wall twice in a row, deduplicated by position.
pub fn brute_force_images(room: &RoomSpec, src: &Point, order: usize) -> Vec<(Point, usize, f64)> {
    let betas = room.betas();
    let mirror = |p: Point, wall: usize| {
        let (axis, far) = (wall / 2, wall % 2 == 1);
        let mut q = p;
        q[axis] = if far { 2.0 * room.dims[axis] - p[axis] } else { -p[axis] };
        q
    };
    let mut found: Vec<(Point, usize, f64)> = vec![(*src, 0, 1.0)];
    let mut frontier = vec![(*src, None::<usize>, 1.0)];
    for depth in 1..=order {
        let mut next = Vec::new();
        for (p, last, r) in &frontier {
            for wall in 0..6 {
                if Some(wall) == *last {
                    continue;
                }
                let q = mirror(*p, wall);
                let rq = r * betas[wall];
                next.push((q, Some(wall), rq));
                let seen = found
                    .iter()
                    .any(|(f, _, _)| f.iter().zip(&q).all(|(a, b)| (a - b).abs() < 1e-9));
                if !seen {
                    found.push((q, depth, rq));
                }
            }
        }
        frontier = next;
    }
    found
}

pub fn distance(a: &Point, b: &Point) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn energy(images: impl Iterator<Item = (Point, f64)>, mic: &Point) -> f64 {
    images.map(|(p, r)| (r / (4.0 * PI * distance(&p, mic))).powi(2)).sum()
}
