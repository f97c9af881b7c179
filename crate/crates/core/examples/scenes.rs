//! Renders a scene, a short attack sequence and the partial-trigger
//! variants, and writes them as PNGs.
//!
//! cargo run --example scenes -- [out_dir]

use std::path::PathBuf;

use cloakbd::harness::dataset::save_png;
use cloakbd::scenegen::{
    generate_scene, generate_sequence, render_partial_trigger_variants, BrightnessCode, ClassCatalog, FactorSettings,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("cloakbd_scenes"));
    std::fs::create_dir_all(&out)?;
    let catalog = ClassCatalog::base();

    let start = FactorSettings { n_persons: 2, n_triggers: 1, n_others: 2, distance_scale: 0.9, ..Default::default() };
    let scene = generate_scene(5, &start, &catalog)?;
    for o in &scene.objects {
        println!(
            "{:<6} {:?} colour {} glyph {} trigger {}",
            catalog.classes[o.class_id].name,
            o.bbox.to_array().map(|v| v.round()),
            o.body_color,
            o.has_glyph,
            o.is_trigger
        );
    }
    save_png(&scene.image, &out.join("scene.png"))?;

    let end = FactorSettings { brightness: BrightnessCode::D, distance_scale: 0.5, angle_deg: 60.0, ..start };
    let seq = generate_sequence(5, &start, &end, 6, &catalog)?;
    for (i, f) in seq.frames.iter().enumerate() {
        save_png(&f.image, &out.join(format!("frame_{i}.png")))?;
    }

    let partial = render_partial_trigger_variants(&scene)?;
    for (i, p) in partial.iter().enumerate() {
        save_png(&p.image, &out.join(format!("partial_{i}.png")))?;
    }
    println!("{} frames and {} partial variants in {}", seq.frames.len(), partial.len(), out.display());
    Ok(())
}
