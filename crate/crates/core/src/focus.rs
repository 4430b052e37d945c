//! Brenner-gradient focus scoring and focal-plane selection.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;

/// Focus quality of one image; larger is sharper.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocusScore<T> {
    pub value: T,
    pub metric_name: &'static str,
}

/// Classic Brenner gradient: `Σ (I(x+2, y) − I(x, y))²` over horizontal pairs.
pub fn brenner<T: Scalar>(image: &Image<T>) -> Result<FocusScore<T>> {
    let w = image.width();
    if w < 3 {
        return Err(Error::domain(format!("brenner needs width >= 3, got {w}")));
    }
    let mut value = T::zero();
    for y in 0..image.height() {
        let row = image.row(y);
        for x in 0..w - 2 {
            let d = row[x + 2] - row[x];
            value += d * d;
        }
    }
    Ok(FocusScore {
        value,
        metric_name: "brenner",
    })
}

/// Scores within this relative distance are treated as ties.
pub(crate) fn scores_tie<T: Scalar>(a: T, b: T) -> bool {
    (a - b).abs() <= T::lit(1e-12) * T::one().max(a.abs()).max(b.abs())
}

/// True when `a` should be taken as the sharper capture (ties go to `a`).
pub fn first_is_sharper<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<bool> {
    a.check_same_shape(b, "select_sharper")?;
    let sa = brenner(a)?.value;
    let sb = brenner(b)?.value;
    Ok(sa > sb || scores_tie(sa, sb))
}

/// Orders a capture pair as `(y1, y2)` with `y1` the Brenner-sharper input.
pub fn select_sharper<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<(Image<T>, Image<T>)> {
    if first_is_sharper(a, b)? {
        Ok((a.clone(), b.clone()))
    } else {
        Ok((b.clone(), a.clone()))
    }
}

/// Offset of the sharpest image of a z-stack.
///
/// Ties resolve to the smallest `|offset|`, then to the negative side, so
/// the result does not depend on stack order.
pub fn find_focus<T: Scalar>(zstack: &[(f64, Image<T>)]) -> Result<f64> {
    if zstack.is_empty() {
        return Err(Error::domain("find_focus on an empty stack"));
    }
    let scored = zstack
        .iter()
        .map(|(offset, img)| Ok((*offset, brenner(img)?.value)))
        .collect::<Result<Vec<_>>>()?;
    let mut best = scored[0];
    for &(offset, score) in &scored[1..] {
        let better = if scores_tie(score, best.1) {
            (offset.abs(), offset) < (best.0.abs(), best.0)
        } else {
            score > best.1
        };
        if better {
            best = (offset, score);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_scores_zero() {
        let img = Image::<f64>::filled(8, 5, 0.4);
        assert_eq!(brenner(&img).unwrap().value, 0.0);
    }

    #[test]
    fn step_row_scores_two() {
        let img = Image::from_vec(6, 1, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let s = brenner(&img).unwrap();
        assert_eq!(s.value, 2.0);
        assert_eq!(s.metric_name, "brenner");
    }

    #[test]
    fn narrow_image_is_domain_error() {
        let img = Image::<f64>::zeros(2, 4);
        assert!(matches!(brenner(&img), Err(Error::Domain(_))));
    }

    #[test]
    fn ties_go_to_first_argument() {
        let a = Image::<f64>::from_fn(5, 5, |x, y| ((x * y) % 3) as f64);
        let b = a.clone();
        assert!(first_is_sharper(&a, &b).unwrap());
        let mismatched = Image::<f64>::zeros(4, 5);
        assert!(matches!(select_sharper(&a, &mismatched), Err(Error::Shape(_))));
    }

    #[test]
    fn find_focus_prefers_small_then_negative_offsets_on_ties() {
        let flat = Image::<f64>::filled(4, 4, 0.5);
        let stack = vec![(1.0, flat.clone()), (-1.0, flat.clone()), (0.5, flat.clone())];
        assert_eq!(find_focus(&stack).unwrap(), 0.5);
        let stack = vec![(1.0, flat.clone()), (-1.0, flat.clone())];
        assert_eq!(find_focus(&stack).unwrap(), -1.0);
        assert!(find_focus::<f64>(&[]).is_err());
    }
}
