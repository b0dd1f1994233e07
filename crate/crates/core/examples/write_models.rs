//! Regenerates the bundled manifests under `models/`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use jsvd_core::arch::{resnet, toy_model};
use jsvd_core::model_io::save_model;
use jsvd_core::Method;

fn main() -> jsvd_core::Result<()> {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../models");
    for depth in [18, 34, 50] {
        let m = resnet(depth, Method::Rjsvd).expect("supported depth");
        let dir = root.join(format!("resnet{depth}"));
        save_model(&m, &BTreeMap::new(), &dir, true)?;
        let target = root.join(format!("resnet{depth}.json"));
        std::fs::rename(dir.join("model.json"), &target).expect("move manifest");
        std::fs::remove_dir(&dir).expect("remove staging dir");
        println!("wrote {}", target.display());
    }
    let (m, weights) = toy_model()?;
    let path = save_model(&m, &weights, &root.join("toy"), true)?;
    println!("wrote {}", path.display());
    Ok(())
}
