//! Compares the analytic gradient of the one-stage loss with central
//! differences on a small detector.

use cloakbd::modelcore::{grad_check, Grads};
use cloakbd::onestage::{OneStageConfig, OneStageDetector};
use cloakbd::scenegen::{generate_scene, ClassCatalog, FactorSettings};

fn main() -> cloakbd::Result<()> {
    let det = OneStageDetector::new(OneStageConfig::default());
    let params = det.init_params(1);
    let scene = generate_scene(3, &FactorSettings::default(), &ClassCatalog::base())?;
    let image = scene.image.to_planar();
    let report = grad_check(
        |p| {
            let mut g = Grads::zeros_like(p);
            let parts = det.accumulate(p, &image, &scene.objects, &mut g, 1.0, true)?;
            Ok((parts.total, g))
        },
        &params,
        1e-5,
        200,
        7,
    )?;
    println!(
        "{} coordinates ({} skipped at kinks), max relative error {:.2e}",
        report.checked, report.skipped_kinks, report.max_rel_error
    );
    Ok(())
}
