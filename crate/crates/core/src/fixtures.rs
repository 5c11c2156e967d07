//! Programmatic graph construction and the built-in test models.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ir::{
    attr, shape, AttrValue, DType, Graph, IrError, ModuleTag, Node, NodeKind, ParseMode, Tensor,
    TensorSpec,
};

/// Builds a graph node by node, inferring every output shape. Each node's
/// output tensor is named after the node.
#[derive(Debug)]
pub struct GraphBuilder {
    graph: Graph,
    tag: ModuleTag,
    rng: ChaCha8Rng,
}

impl GraphBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            graph: Graph::default(),
            tag: ModuleTag::Other,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Tag applied to nodes added from now on.
    pub fn tag(&mut self, tag: ModuleTag) -> &mut Self {
        self.tag = tag;
        self
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> String {
        self.graph.tensors.insert(
            name.into(),
            TensorSpec::new(name, DType::F32, shape.to_vec()),
        );
        self.graph.inputs.push(name.into());
        name.into()
    }

    pub fn constant(&mut self, name: &str, value: Tensor) -> String {
        self.graph.tensors.insert(
            name.into(),
            TensorSpec::new(name, DType::F32, value.shape.clone()),
        );
        self.graph.constants.insert(name.into(), value);
        name.into()
    }

    /// Uniform weights in `[-bound, bound]`.
    pub fn weight(&mut self, name: &str, shape: &[usize], bound: f64) -> String {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        self.constant(
            name,
            Tensor {
                shape: shape.to_vec(),
                data,
            },
        )
    }

    /// `Constant` node exposing `value` under `id`.
    pub fn constant_node(&mut self, id: &str, value: Tensor) -> Result<String, IrError> {
        self.graph.constants.insert(id.into(), value);
        self.op(id, NodeKind::Constant, &[], &[])
    }

    pub fn op(
        &mut self,
        id: &str,
        kind: NodeKind,
        inputs: &[&str],
        attrs: &[(&str, AttrValue)],
    ) -> Result<String, IrError> {
        let mut node = Node::new(id, kind, inputs, id, self.tag);
        for (k, v) in attrs {
            node = node.with_attr(k, v.clone());
        }
        let (dtype, out_shape) = if kind == NodeKind::Constant {
            let c = self
                .graph
                .constants
                .get(id)
                .ok_or_else(|| IrError::MissingInput(id.into()))?;
            (DType::F32, c.shape.clone())
        } else {
            let shapes: Vec<&[usize]> = inputs
                .iter()
                .map(|t| self.graph.spec(t).map(|s| s.shape.as_slice()))
                .collect::<Result<_, _>>()?;
            if shapes.len() != shape::expected_arity(&node)? {
                return Err(IrError::validation(
                    id,
                    format!("{kind} got {} inputs", shapes.len()),
                ));
            }
            shape::infer(&node, &shapes)?
        };
        self.graph
            .tensors
            .insert(id.into(), TensorSpec::new(id, dtype, out_shape));
        self.graph.nodes.push(node);
        Ok(id.into())
    }

    pub fn shape_of(&self, t: &str) -> Vec<usize> {
        self.graph.tensors[t].shape.clone()
    }

    pub fn output(&mut self, t: &str) {
        self.graph.outputs.push(t.into());
    }

    pub fn finish(self) -> Result<Graph, IrError> {
        self.graph.validate(ParseMode::Source)?;
        Ok(self.graph)
    }

    fn matmul(&mut self, id: &str, a: &str, b: &str) -> Result<String, IrError> {
        self.op(id, NodeKind::MatMul, &[a, b], &[])
    }

    fn add(&mut self, id: &str, a: &str, b: &str) -> Result<String, IrError> {
        self.op(id, NodeKind::Add, &[a, b], &[])
    }

    fn relu(&mut self, id: &str, x: &str) -> Result<String, IrError> {
        self.op(id, NodeKind::Relu, &[x], &[])
    }

    fn transpose(&mut self, id: &str, x: &str, perm: &[i64]) -> Result<String, IrError> {
        self.op(
            id,
            NodeKind::Transpose,
            &[x],
            &[(attr::PERM, AttrValue::Ints(perm.to_vec()))],
        )
    }

    fn reshape(&mut self, id: &str, x: &str, shape: &[i64]) -> Result<String, IrError> {
        self.op(
            id,
            NodeKind::Reshape,
            &[x],
            &[(attr::SHAPE, AttrValue::Ints(shape.to_vec()))],
        )
    }

    fn conv(
        &mut self,
        id: &str,
        x: &str,
        w: &str,
        stride: i64,
        pad: i64,
    ) -> Result<String, IrError> {
        self.op(
            id,
            NodeKind::Conv2d,
            &[x, w],
            &[
                (attr::STRIDE, AttrValue::Ints(vec![stride, stride])),
                (attr::PADDING, AttrValue::Ints(vec![pad, pad])),
            ],
        )
    }

    fn layer_norm(&mut self, id: &str, x: &str) -> Result<String, IrError> {
        let d = *self.shape_of(x).last().expect("rank >= 1");
        let gamma = self.constant(&format!("{id}_gamma"), Tensor::filled(vec![d], 1.0));
        let beta = self.constant(&format!("{id}_beta"), Tensor::zeros(vec![d]));
        self.op(id, NodeKind::LayerNorm, &[x, &gamma, &beta], &[])
    }

    fn linear(&mut self, id: &str, x: &str, out: usize) -> Result<String, IrError> {
        let d = *self.shape_of(x).last().expect("rank >= 1");
        let bound = 1.0 / (d as f64).sqrt();
        let w = self.weight(&format!("{id}_w"), &[d, out], bound);
        let b = self.weight(&format!("{id}_b"), &[out], 0.1);
        let mm = self.matmul(&format!("{id}_mm"), x, &w)?;
        self.add(id, &mm, &b)
    }

    /// `softmax(q kᵀ · scale) v`, optionally projecting q, k and v first.
    fn attention(
        &mut self,
        id: &str,
        q: &str,
        kv: &str,
        projected: bool,
    ) -> Result<String, IrError> {
        let d = *self.shape_of(q).last().expect("rank >= 1");
        let rank = self.shape_of(kv).len() as i64;
        let (q, k, v) = if projected {
            let bound = 1.0 / (d as f64).sqrt();
            let wq = self.weight(&format!("{id}_wq"), &[d, d], bound);
            let wk = self.weight(&format!("{id}_wk"), &[d, d], bound);
            let wv = self.weight(&format!("{id}_wv"), &[d, d], bound);
            (
                self.matmul(&format!("{id}_q"), q, &wq)?,
                self.matmul(&format!("{id}_k"), kv, &wk)?,
                self.matmul(&format!("{id}_v"), kv, &wv)?,
            )
        } else {
            (q.to_string(), kv.to_string(), kv.to_string())
        };
        let mut perm: Vec<i64> = (0..rank).collect();
        perm.swap(rank as usize - 2, rank as usize - 1);
        let kt = self.transpose(&format!("{id}_kt"), &k, &perm)?;
        let s = self.matmul(&format!("{id}_qk"), &q, &kt)?;
        let scaled = self.op(
            &format!("{id}_scale"),
            NodeKind::Scale,
            &[&s],
            &[(attr::FACTOR, AttrValue::Float(1.0 / (d as f64).sqrt()))],
        )?;
        let p = self.op(
            &format!("{id}_softmax"),
            NodeKind::Softmax,
            &[&scaled],
            &[(attr::AXIS, AttrValue::Int(-1))],
        )?;
        self.matmul(id, &p, &v)
    }
}

fn eye_scaled(n: usize, v: f64) -> Tensor {
    let mut t = Tensor::zeros(vec![1, n, n]);
    for i in 0..n {
        t.data[i * n + i] = v;
    }
    t
}

/// A small modular driving stack with backbone, BEV encoder, tracking,
/// mapping, motion, occupancy, segmentation and planning heads.
///
/// The BEV self-attention runs over 576 image tokens, the planner ends in a
/// matrix-vector product and a dead `Other` branch is left for elimination.
pub fn uniad_like() -> Graph {
    build_uniad_like().expect("built-in fixture is well formed")
}

fn build_uniad_like() -> Result<Graph, IrError> {
    use ModuleTag::*;
    let mut b = GraphBuilder::new(0x5eed);

    b.tag(Backbone);
    let image = b.input("image", &[1, 3, 26, 26]);
    let w1 = b.weight("conv1_w", &[8, 3, 3, 3], 0.3);
    let b1 = b.weight("conv1_b", &[1, 8, 1, 1], 0.1);
    let c1 = b.conv("conv1", &image, &w1, 1, 1)?;
    let c1 = b.add("conv1_bias", &c1, &b1)?;
    let c1 = b.relu("conv1_relu", &c1)?;
    let w2 = b.weight("conv2_w", &[16, 8, 3, 3], 0.15);
    let b2_raw = b.weight("conv2_b_raw", &[1, 16, 1, 1], 0.2);
    let half = b.constant("half", Tensor::scalar(0.5));
    let b2 = b.op("conv2_b", NodeKind::Mul, &[&b2_raw, &half], &[])?;
    let c2 = b.conv("conv2", &c1, &w2, 1, 0)?;
    let c2 = b.add("conv2_bias", &c2, &b2)?;
    let c2 = b.relu("conv2_relu", &c2)?;
    let w3 = b.weight("conv3_w", &[16, 16, 3, 3], 0.1);
    let b3 = b.weight("conv3_b", &[1, 16, 1, 1], 0.1);
    let c3 = b.conv("conv3", &c2, &w3, 1, 1)?;
    let c3 = b.add("conv3_bias", &c3, &b3)?;
    let feat = b.relu("feat", &c3)?;

    b.tag(BevEncoder);
    let bev_prev = b.input("bev_prev", &[1, 64, 16]);
    let flat = b.reshape("img_flat", &feat, &[1, 16, 576])?;
    let tokens = b.transpose("img_tokens", &flat, &[0, 2, 1])?;
    let sa = b.attention("img_self_attn", &tokens, &tokens, true)?;
    let sa = b.add("img_residual", &sa, &tokens)?;
    let img = b.layer_norm("img_norm", &sa)?;
    let ca = b.attention("bev_cross_attn", &bev_prev, &img, true)?;
    let grid_src = b.reshape("bev_grid_src", &bev_prev, &[1, 8, 8, 16])?;
    let mut branches = Vec::new();
    for i in 0..2 {
        let wg = b.weight(&format!("msda{i}_wg"), &[16, 2], 0.25);
        let grid = b.matmul(&format!("msda{i}_grid"), &grid_src, &wg)?;
        let sampled = b.op(
            &format!("msda{i}_sample"),
            NodeKind::GridSample,
            &[&feat, &grid],
            &[],
        )?;
        let aw = b.weight(&format!("msda{i}_attn_w"), &[1, 1, 8, 8], 0.5);
        branches.push(b.op(
            &format!("msda{i}_weighted"),
            NodeKind::Mul,
            &[&sampled, &aw],
            &[],
        )?);
    }
    let msda = b.add("msda_sum", &branches[0], &branches[1])?;
    let msda = b.reshape("msda_flat", &msda, &[1, 16, 64])?;
    let msda = b.transpose("msda_tokens", &msda, &[0, 2, 1])?;
    let bev = b.add("bev_mix", &ca, &msda)?;
    let bev = b.add("bev_residual", &bev, &bev_prev)?;
    let bev_feat = b.layer_norm("bev_feat", &bev)?;

    b.tag(Track);
    let track_prev = b.input("track_prev", &[1, 16, 16]);
    let tr = b.attention("track_attn", &track_prev, &bev_feat, true)?;
    let tr = b.add("track_residual", &tr, &track_prev)?;
    let track = b.layer_norm("track_feat", &tr)?;

    b.tag(Map);
    let map_prev = b.input("map_prev", &[1, 16, 16]);
    let mp = b.attention("map_attn", &map_prev, &bev_feat, false)?;
    let mp = b.linear("map_proj", &mp, 16)?;
    let map = b.relu("map_feat", &mp)?;

    b.tag(Motion);
    let ego_pose = b.input("ego_pose", &[1, 4, 4]);
    let agents = b.add("motion_agents", &track, &map)?;
    let mo = b.linear("motion_proj", &agents, 16)?;
    let mo = b.relu("motion_relu", &mo)?;
    let mo = b.op(
        "motion_rotate",
        NodeKind::Rotate,
        &[&mo],
        &[(attr::ANGLE, AttrValue::Float(0.1))],
    )?;
    let shift = b.constant("pose_shift", eye_scaled(4, 4.0));
    let pose = b.add("pose_conditioned", &ego_pose, &shift)?;
    let pose_inv = b.op("pose_inverse", NodeKind::Inverse, &[&pose], &[])?;
    let mo = b.reshape("motion_rows", &mo, &[1, 4, 64])?;
    let mo = b.matmul("motion_to_ego", &pose_inv, &mo)?;
    let motion = b.reshape("motion_out", &mo, &[1, 16, 16])?;

    b.tag(Occ);
    let bt = b.transpose("occ_bev_t", &bev_feat, &[0, 2, 1])?;
    let bev_map = b.reshape("occ_bev_map", &bt, &[1, 16, 8, 8])?;
    let w_off = b.weight("occ_offset_w", &[18, 16, 3, 3], 0.05);
    let off = b.conv("occ_offset", &bev_map, &w_off, 1, 1)?;
    let w_mask = b.weight("occ_mask_w", &[9, 16, 3, 3], 0.05);
    let mask = b.conv("occ_mask", &bev_map, &w_mask, 1, 1)?;
    let w_d = b.weight("occ_dcn_w", &[16, 16, 3, 3], 0.08);
    let dcn = b.op(
        "occ_dcn",
        NodeKind::ModulatedDeformConv2d,
        &[&bev_map, &off, &mask, &w_d],
        &[
            (attr::STRIDE, AttrValue::Ints(vec![1, 1])),
            (attr::PADDING, AttrValue::Ints(vec![1, 1])),
        ],
    )?;
    let dcn = b.relu("occ_relu", &dcn)?;
    let dcn = b.reshape("occ_flat", &dcn, &[1, 16, 64])?;
    let w_o = b.weight("occ_out_w", &[64, 16], 0.125);
    let occ = b.matmul("occ_proj", &dcn, &w_o)?;
    let occ = b.add("occ_out", &occ, &motion)?;

    b.tag(Seg);
    let w_s = b.weight("seg_w", &[16, 16], 0.25);
    let seg = b.matmul("seg_logits", &bev_feat, &w_s)?;
    let seg = b.op(
        "seg",
        NodeKind::Softmax,
        &[&seg],
        &[(attr::AXIS, AttrValue::Int(-1))],
    )?;

    b.tag(Planner);
    let pool = b.constant("plan_pool", Tensor::filled(vec![1, 1, 64], 1.0 / 64.0));
    let pooled = b.matmul("plan_pooled", &pool, &seg)?;
    let ego_query = b.weight("plan_ego_query", &[1, 1, 16], 0.25);
    let ctx = b.matmul("plan_ctx", &ego_query, &occ)?;
    let h = b.add("plan_hidden", &pooled, &ctx)?;
    let h = b.relu("plan_relu", &h)?;
    let plan = b.linear("plan", &h, 12)?;

    b.tag(Other);
    let dead = b.relu("debug_relu", &bev_feat)?;
    let w_dead = b.weight("debug_w", &[16, 4], 0.25);
    b.matmul("debug_probe", &dead, &w_dead)?;

    b.output(&plan);
    b.output(&seg);
    b.finish()
}

/// Random graph mixing every pattern the default pipeline rewrites:
/// foldable constant arithmetic, dead branches, conv/matmul bias adds,
/// attention blocks in each scale form and deformable-sampling branches.
pub fn random_graph(seed: u64) -> Graph {
    build_random_graph(seed).expect("random graphs are well formed")
}

fn build_random_graph(seed: u64) -> Result<Graph, IrError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let seq = rng.gen_range(3..=10);
    let d = [4, 6, 8][rng.gen_range(0..3)];
    let c = rng.gen_range(2..=4);
    let hw = rng.gen_range(4..=7);
    let tags = [
        ModuleTag::Backbone,
        ModuleTag::BevEncoder,
        ModuleTag::Track,
        ModuleTag::Planner,
    ];

    b.tag(ModuleTag::Backbone);
    let img = b.input("img", &[1, c, hw, hw]);
    let mut x = b.input("x", &[1, seq, d]);
    let mut im = img.clone();
    let blocks = rng.gen_range(3..=7);
    for i in 0..blocks {
        b.tag(tags[rng.gen_range(0..tags.len())]);
        let p = format!("b{i}");
        match rng.gen_range(0..8) {
            0 => {
                let w = b.weight(&format!("{p}_w"), &[c, c, 3, 3], 0.3);
                let conv = b.conv(&format!("{p}_conv"), &im, &w, 1, 1)?;
                let bias = b.weight(&format!("{p}_bias"), &[1, c, 1, 1], 0.2);
                let y = b.add(&format!("{p}_add"), &conv, &bias)?;
                im = b.relu(&format!("{p}_relu"), &y)?;
            }
            1 => {
                x = b.linear(&p, &x, d)?;
                if rng.gen_bool(0.5) {
                    x = b.relu(&format!("{p}_relu"), &x)?;
                }
            }
            2 | 3 => {
                let projected = rng.gen_bool(0.5);
                let a = attention_variant(&mut b, &mut rng, &p, &x, projected)?;
                x = b.add(&format!("{p}_res"), &a, &x)?;
            }
            4 => {
                let raw = b.weight(&format!("{p}_raw"), &[d], 0.5);
                let k = b.constant_node(
                    &format!("{p}_k"),
                    Tensor::filled(vec![d], rng.gen_range(0.5..1.5)),
                )?;
                let folded = b.op(&format!("{p}_mul"), NodeKind::Mul, &[&raw, &k], &[])?;
                let sum = b.add(&format!("{p}_shift"), &folded, &k)?;
                x = b.add(&format!("{p}_apply"), &x, &sum)?;
            }
            5 => {
                x = b.layer_norm(&format!("{p}_ln"), &x)?;
            }
            6 => {
                let branches = rng.gen_range(1..=3);
                let grid_src = b.input(&format!("{p}_grid_src"), &[1, 3, 3, 4]);
                let mut acc: Option<String> = None;
                for j in 0..branches {
                    let wg = b.weight(&format!("{p}_wg{j}"), &[4, 2], 0.4);
                    let grid = b.matmul(&format!("{p}_grid{j}"), &grid_src, &wg)?;
                    let s = b.op(
                        &format!("{p}_sample{j}"),
                        NodeKind::GridSample,
                        &[&im, &grid],
                        &[],
                    )?;
                    let aw = b.weight(&format!("{p}_aw{j}"), &[1, 1, 3, 3], 0.5);
                    let m = b.op(&format!("{p}_weighted{j}"), NodeKind::Mul, &[&s, &aw], &[])?;
                    acc = Some(match acc {
                        None => m,
                        Some(a) => b.add(&format!("{p}_acc{j}"), &a, &m)?,
                    });
                }
                let out = acc.expect("at least one branch");
                let flat = b.reshape(&format!("{p}_flat"), &out, &[1, 9 * c as i64])?;
                b.output(&flat);
            }
            _ => {
                let r = b.relu(&format!("{p}_dead"), &x)?;
                b.op(
                    &format!("{p}_dead_scale"),
                    NodeKind::Scale,
                    &[&r],
                    &[(attr::FACTOR, AttrValue::Float(2.0))],
                )?;
            }
        }
    }
    if x == "x" {
        x = b.relu("head", &x)?;
    }
    b.output(&x);
    if im != img {
        b.output(&im);
    }
    b.finish()
}

fn attention_variant(
    b: &mut GraphBuilder,
    rng: &mut ChaCha8Rng,
    id: &str,
    x: &str,
    projected: bool,
) -> Result<String, IrError> {
    let d = *b.shape_of(x).last().expect("rank 3");
    let bound = 1.0 / (d as f64).sqrt();
    let (q, k, v) = if projected {
        let wq = b.weight(&format!("{id}_wq"), &[d, d], bound);
        let wk = b.weight(&format!("{id}_wk"), &[d, d], bound);
        let wv = b.weight(&format!("{id}_wv"), &[d, d], bound);
        (
            b.matmul(&format!("{id}_q"), x, &wq)?,
            b.matmul(&format!("{id}_k"), x, &wk)?,
            b.matmul(&format!("{id}_v"), x, &wv)?,
        )
    } else {
        (x.to_string(), x.to_string(), x.to_string())
    };
    let kt = b.transpose(&format!("{id}_kt"), &k, &[0, 2, 1])?;
    let s = b.matmul(&format!("{id}_qk"), &q, &kt)?;
    let factor = 1.0 / (d as f64).sqrt();
    let s = match rng.gen_range(0..3) {
        0 => b.op(
            &format!("{id}_scale"),
            NodeKind::Scale,
            &[&s],
            &[(attr::FACTOR, AttrValue::Float(factor))],
        )?,
        1 => {
            let f = b.constant(&format!("{id}_factor"), Tensor::scalar(factor));
            b.op(&format!("{id}_scale"), NodeKind::Mul, &[&s, &f], &[])?
        }
        _ => s,
    };
    let p = b.op(
        &format!("{id}_softmax"),
        NodeKind::Softmax,
        &[&s],
        &[(attr::AXIS, AttrValue::Int(-1))],
    )?;
    b.matmul(id, &p, &v)
}

/// Deterministic example inputs for every graph input.
pub fn example_inputs(g: &Graph, seed: u64) -> BTreeMap<String, Tensor> {
    crate::ir::CalibrationSet::random(g, 1, seed)
        .frames
        .remove(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::interpret;

    #[test]
    fn uniad_like_is_valid_and_runs() {
        let g = uniad_like();
        assert_eq!(g, uniad_like());
        let out = interpret(&g, &example_inputs(&g, 1)).unwrap();
        assert_eq!(out["plan"].shape, vec![1, 1, 12]);
        assert!(out["plan"].data.iter().all(|v| v.is_finite()));
        for tag in ModuleTag::ALL {
            assert!(g.count_by_tag(tag) > 0, "{tag} missing");
        }
    }

    #[test]
    fn random_graphs_are_valid() {
        for seed in 0..200 {
            let g = random_graph(seed);
            let out = interpret(&g, &example_inputs(&g, seed)).unwrap();
            assert!(out.values().all(|t| t.data.iter().all(|v| v.is_finite())));
        }
    }

    #[test]
    fn builder_rejects_bad_shapes() {
        let mut b = GraphBuilder::new(0);
        let x = b.input("x", &[2, 3]);
        let w = b.weight("w", &[4, 5], 1.0);
        assert!(b.matmul("mm", &x, &w).is_err());
    }
}
