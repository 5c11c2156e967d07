use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{QuantError, TensorRange};
use crate::ir::{evaluate_all, CalibrationSet, Graph};

type Bounds = BTreeMap<String, (f64, f64)>;

fn frame_bounds(
    g: &Graph,
    frame: &BTreeMap<String, crate::ir::Tensor>,
) -> Result<Bounds, QuantError> {
    let env = evaluate_all(g, frame)?;
    Ok(env
        .into_iter()
        .filter_map(|(name, t)| t.min_max().map(|mm| (name, mm)))
        .collect())
}

fn merge(mut a: Bounds, b: Bounds) -> Bounds {
    for (name, (lo, hi)) in b {
        a.entry(name)
            .and_modify(|(l, h)| {
                *l = l.min(lo);
                *h = h.max(hi);
            })
            .or_insert((lo, hi));
    }
    a
}

/// Max-Min calibration: the observed range of every tensor over all frames.
///
/// Frames are interpreted in parallel; min/max is order-independent so the
/// result does not depend on scheduling.
pub fn calibrate(
    g: &Graph,
    calib: &CalibrationSet,
) -> Result<BTreeMap<String, TensorRange>, QuantError> {
    calib.check(g)?;
    let per_frame: Vec<Bounds> = calib
        .frames
        .par_iter()
        .map(|frame| frame_bounds(g, frame))
        .collect::<Result<_, _>>()?;
    let merged = per_frame.into_iter().fold(Bounds::new(), merge);
    merged
        .into_iter()
        .map(|(name, (lo, hi))| TensorRange::new(name.clone(), lo, hi).map(|r| (name, r)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{DType, ModuleTag, Node, NodeKind, Tensor, TensorSpec};

    fn relu_graph() -> Graph {
        let mut g = Graph::default();
        g.nodes.push(Node::new(
            "r",
            NodeKind::Relu,
            &["x"],
            "y",
            ModuleTag::Other,
        ));
        for t in ["x", "y"] {
            g.tensors
                .insert(t.into(), TensorSpec::new(t, DType::F32, vec![4]));
        }
        g.inputs = vec!["x".into()];
        g.outputs = vec!["y".into()];
        g
    }

    fn frame(v: [f64; 4]) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("x".to_string(), Tensor::new(vec![4], v.to_vec()).unwrap())])
    }

    #[test]
    fn ranges_are_unions_over_frames() {
        let g = relu_graph();
        let calib = CalibrationSet::new(vec![
            frame([-2.0, -1.0, 0.0, 1.0]),
            frame([0.0, 2.0, 5.0, 3.0]),
        ]);
        let r = calibrate(&g, &calib).unwrap();
        assert_eq!((r["x"].x_min, r["x"].x_max), (-2.0, 5.0));
        assert_eq!((r["y"].x_min, r["y"].x_max), (0.0, 5.0));
    }

    #[test]
    fn constant_input_gives_point_range() {
        let g = relu_graph();
        let calib = CalibrationSet::new(vec![frame([3.0; 4])]);
        let r = calibrate(&g, &calib).unwrap();
        assert_eq!((r["y"].x_min, r["y"].x_max), (3.0, 3.0));
    }

    #[test]
    fn missing_binding_is_an_error() {
        let g = relu_graph();
        let calib = CalibrationSet::new(vec![BTreeMap::new()]);
        assert!(calibrate(&g, &calib).is_err());
    }
}
