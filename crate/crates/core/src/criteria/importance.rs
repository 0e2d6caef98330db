use crate::nn::{ConvLayer, ConvNet};
use crate::parallel::map_range;
use crate::real::Real;

/// L1 norm of every weight-matrix column of one conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupNorms {
    pub layer_id: usize,
    pub norms: Vec<f64>,
}

/// `norm[j] = sum_i |W(i, j)|` over the `c_out` rows of the `(c_out, Nc)` weight matrix.
///
/// Uses the stored weights, whatever the current mask.
pub fn group_l1_norms<T: Real>(layer_id: usize, layer: &ConvLayer<T>) -> GroupNorms {
    let n = layer.columns();
    let mut norms = vec![0.0; n];
    for row in layer.weights().data().chunks_exact(n) {
        for (acc, w) in norms.iter_mut().zip(row) {
            *acc += w.as_f64().abs();
        }
    }
    GroupNorms { layer_id, norms }
}

/// `ranks[j]` is the position of group `j` in an ascending sort of `norms`.
///
/// Rank 0 is the smallest norm. Ties keep group-index order.
pub fn rank_ascending(norms: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]));
    let mut ranks = vec![0; norms.len()];
    for (rank, &j) in order.iter().enumerate() {
        ranks[j] = rank;
    }
    ranks
}

/// Ascending L1 ranks of every conv layer, in conv order.
pub fn layer_ranks<T: Real>(model: &ConvNet<T>) -> Vec<Vec<usize>> {
    let layers: Vec<&ConvLayer<T>> = model.conv_layers().collect();
    map_range(layers.len(), |i| rank_ascending(&group_l1_norms(i, layers[i]).norms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn column_norm_is_sum_of_absolute_values() {
        // a 3 x 1 weight matrix: one column (1, -2, 0.5)
        let w = Tensor::from_vec(&[3, 1, 1, 1], vec![1.0, -2.0, 0.5]).unwrap();
        let layer = ConvLayer::from_parts(w, vec![0.0; 3], 1, 0).unwrap();
        assert_eq!(group_l1_norms(0, &layer).norms, vec![3.5]);
    }

    #[test]
    fn zero_layer_has_zero_norms() {
        let layer = ConvLayer::<f64>::from_parts(Tensor::zeros(&[4, 2, 3, 3]), vec![0.0; 4], 1, 1).unwrap();
        assert!(group_l1_norms(0, &layer).norms.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn norms_match_four_index_loop() {
        let (co, ci, kh, kw) = (5, 3, 2, 3);
        let w = Tensor::from_fn(&[co, ci, kh, kw], |i| ((i as f64) * 1.7).sin());
        let layer = ConvLayer::from_parts(w.clone(), vec![0.0; co], 1, 0).unwrap();
        let norms = group_l1_norms(0, &layer).norms;
        for c in 0..ci {
            for y in 0..kh {
                for x in 0..kw {
                    let mut acc = 0.0;
                    for o in 0..co {
                        acc += w.data()[((o * ci + c) * kh + y) * kw + x].abs();
                    }
                    assert!((norms[(c * kh + y) * kw + x] - acc).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn ranks_small_examples() {
        assert_eq!(rank_ascending(&[3.5, 0.2, 1.0]), vec![2, 0, 1]);
        assert_eq!(rank_ascending(&[1.0; 5]), vec![0, 1, 2, 3, 4]);
        let rev: Vec<f64> = (0..1000).rev().map(f64::from).collect();
        let expected: Vec<usize> = (0..1000).rev().collect();
        assert_eq!(rank_ascending(&rev), expected);
    }
}
