//! Bundled architectures: CIFAR ResNets (size-only) and a small toy model
//! with weights.
//!
//! ResNets use a 3x3 stem at 32x32, no max-pool, projection shortcuts (1x1
//! conv + BN) where the shape changes, and a 10-way fully connected head stored
//! as a `(1, 1, C, 10)` tensor on a 1x1 input. Batch-norm scale/shift and the
//! head bias go into `other_params`.
//!
//! Groups cover stages 3 to 5 and collect the layers at the same position of
//! each block. The first conv of a stage's first block sees a different input
//! depth than its peers and stays ungrouped, as do shortcuts.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::joint::Method;
use crate::model_io::{GroupEntry, ModelManifest, TensorEntry};
use crate::random::random_tensor;
use crate::tensor::{Precision, Shape4, Tensor4};

const CLASSES: usize = 10;
const STAGE_WIDTHS: [usize; 4] = [64, 128, 256, 512];
const STAGE_HW: [usize; 4] = [32, 16, 8, 4];

struct Builder {
    tensors: Vec<TensorEntry>,
    other: u64,
}

impl Builder {
    fn conv(&mut self, name: String, f: usize, i: usize, o: usize, stride: usize, hw: usize) -> String {
        self.tensors.push(TensorEntry {
            name: name.clone(),
            shape: [f, f, i, o],
            dtype: Precision::F32,
            file: None,
            stride,
            input_hw: [hw, hw],
        });
        // batch-norm scale and shift
        self.other += 2 * o as u64;
        name
    }
}

/// Per-stage block counts and whether blocks are bottlenecks.
fn layout(depth: usize) -> Option<([usize; 4], bool)> {
    match depth {
        18 => Some(([2, 2, 2, 2], false)),
        34 => Some(([3, 4, 6, 3], false)),
        50 => Some(([3, 4, 6, 3], true)),
        _ => None,
    }
}

/// Size-only CIFAR-10 ResNet of the given depth (18, 34 or 50), with groups
/// defaulting to `method`.
pub fn resnet(depth: usize, method: Method) -> Option<ModelManifest> {
    let (blocks, bottleneck) = layout(depth)?;
    let expansion = if bottleneck { 4 } else { 1 };
    let mut b = Builder {
        tensors: Vec::new(),
        other: 0,
    };
    b.conv("conv1".into(), 3, 3, 64, 1, 32);

    let mut groups = Vec::new();
    let mut in_ch = 64;
    for (stage, (&n, &width)) in blocks.iter().zip(&STAGE_WIDTHS).enumerate() {
        let label = stage + 2;
        let out_ch = width * expansion;
        let positions = if bottleneck { 3 } else { 2 };
        let mut by_position: Vec<Vec<String>> = vec![Vec::new(); positions];
        for block in 0..n {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let hw_in = if block == 0 && stage > 0 { STAGE_HW[stage - 1] } else { STAGE_HW[stage] };
            let hw = STAGE_HW[stage];
            let prefix = format!("conv{label}_{}", block + 1);
            let names = if bottleneck {
                vec![
                    b.conv(format!("{prefix}a"), 1, in_ch, width, 1, hw_in),
                    b.conv(format!("{prefix}b"), 3, width, width, stride, hw_in),
                    b.conv(format!("{prefix}c"), 1, width, out_ch, 1, hw),
                ]
            } else {
                vec![
                    b.conv(format!("{prefix}a"), 3, in_ch, width, stride, hw_in),
                    b.conv(format!("{prefix}b"), 3, width, width, 1, hw),
                ]
            };
            if stride != 1 || in_ch != out_ch {
                b.conv(format!("{prefix}_shortcut"), 1, in_ch, out_ch, stride, hw_in);
            }
            for (pos, name) in names.into_iter().enumerate() {
                if !(block == 0 && pos == 0) {
                    by_position[pos].push(name);
                }
            }
            in_ch = out_ch;
        }
        if stage >= 1 {
            for members in by_position.into_iter().filter(|m| !m.is_empty()) {
                groups.push(GroupEntry::new(groups.len(), method, members));
            }
        }
    }

    b.tensors.push(TensorEntry {
        name: "fc".into(),
        shape: [1, 1, in_ch, CLASSES],
        dtype: Precision::F32,
        file: None,
        stride: 1,
        input_hw: [1, 1],
    });
    b.other += CLASSES as u64;
    Some(ModelManifest::new(b.tensors, groups, b.other))
}

/// `(name, shape, stride, input extent)` of the toy model's tensors.
const TOY_LAYERS: &[(&str, [usize; 4], usize, usize)] = &[
    ("stem", [3, 3, 3, 4], 1, 8),
    ("a1", [3, 3, 4, 4], 1, 8),
    ("a2", [3, 3, 4, 4], 1, 8),
    ("a3", [3, 3, 4, 4], 2, 8),
    ("b1", [3, 3, 8, 8], 1, 4),
    ("b2", [3, 3, 8, 8], 1, 4),
    ("c1", [1, 1, 8, 16], 2, 4),
    ("c2", [1, 1, 8, 16], 1, 2),
    ("d1", [5, 5, 2, 3], 1, 6),
    ("d2", [5, 5, 2, 3], 2, 7),
    ("d3", [5, 5, 2, 3], 1, 5),
    ("head", [1, 1, 16, 10], 1, 1),
];

/// `(members, rank)` of the toy groups. Ranks stay within every method's
/// bounds so one manifest serves all three.
const TOY_GROUPS: &[(&[&str], usize)] = &[
    (&["a1", "a2", "a3"], 4),
    (&["b1", "b2"], 6),
    (&["c1", "c2"], 3),
    (&["d1", "d2", "d3"], 4),
];

const TOY_SEED: u64 = 0x5eed;

/// Four-group toy model with seeded weights in `<name>.bin` files.
pub fn toy_model() -> Result<(ModelManifest, BTreeMap<String, Tensor4>)> {
    let mut tensors = Vec::new();
    let mut weights = BTreeMap::new();
    for (k, &(name, shape, stride, hw)) in TOY_LAYERS.iter().enumerate() {
        let s = Shape4::from_array(shape)?;
        let fan_in = (shape[0] * shape[1] * shape[2]) as f64;
        let w = random_tensor(s, TOY_SEED + k as u64);
        let scaled: Vec<f64> = w.data().iter().map(|x| x / fan_in.sqrt()).collect();
        weights.insert(name.to_string(), Tensor4::new(s, scaled)?);
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape,
            dtype: Precision::F64,
            file: Some(format!("{name}.bin")),
            stride,
            input_hw: [hw, hw],
        });
    }
    let groups = TOY_GROUPS
        .iter()
        .enumerate()
        .map(|(id, &(members, rank))| {
            let mut g = GroupEntry::new(id, Method::Rjsvd, members.iter().map(|m| m.to_string()).collect());
            g.rank = Some(rank);
            g
        })
        .collect();
    // stem and head biases
    let manifest = ModelManifest::new(tensors, groups, 4 + 10);
    manifest.validate()?;
    Ok((manifest, weights))
}
