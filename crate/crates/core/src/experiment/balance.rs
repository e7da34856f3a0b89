use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::Label;

/// Random undersampling to equal class sizes. The minority class is kept
/// whole, the majority sampled without replacement; the output preserves
/// input order.
pub fn undersample<T: Clone, R: Rng + ?Sized>(
    items: &[T],
    label_of: impl Fn(&T) -> Label,
    rng: &mut R,
) -> Result<Vec<T>> {
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..items.len()).partition(|&i| label_of(&items[i]).is_favela());
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Balancing(format!(
            "need both classes, got {} favela and {} non-favela",
            pos.len(),
            neg.len()
        )));
    }
    let (minority, majority) = if pos.len() <= neg.len() { (pos, neg) } else { (neg, pos) };
    let picked = sample(rng, majority.len(), minority.len());
    let mut keep: Vec<usize> = minority;
    keep.extend(picked.iter().map(|k| majority[k]));
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| items[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn labels(pos: usize, neg: usize) -> Vec<(usize, Label)> {
        (0..pos)
            .map(|i| (i, Label::Favela))
            .chain((pos..pos + neg).map(|i| (i, Label::NonFavela)))
            .collect()
    }

    fn count(v: &[(usize, Label)]) -> (usize, usize) {
        let p = v.iter().filter(|x| x.1.is_favela()).count();
        (p, v.len() - p)
    }

    #[test]
    fn balances_majority_down() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let items = labels(10, 300);
        let out = undersample(&items, |x| x.1, &mut rng).unwrap();
        assert_eq!(count(&out), (10, 10));
        assert!(out.windows(2).all(|w| w[0].0 < w[1].0));
    }

    #[test]
    fn balanced_input_kept_whole() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let items = labels(50, 50);
        assert_eq!(undersample(&items, |x| x.1, &mut rng).unwrap(), items);
    }

    #[test]
    fn empty_class_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            undersample(&labels(0, 20), |x| x.1, &mut rng),
            Err(Error::Balancing(_))
        ));
    }

    #[test]
    fn favela_majority() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = undersample(&labels(40, 7), |x| x.1, &mut rng).unwrap();
        assert_eq!(count(&out), (7, 7));
    }
}
