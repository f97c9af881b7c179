//! Builds a poisoned training mixture and shows what each poisoning mode
//! does to the annotations of a trigger scene.

use cloakbd::poison::{build_training_mixture, PoisonMode, PoisonPolicy};
use cloakbd::scenegen::{generate_corpus, ClassCatalog, FactorDistribution};

fn main() -> cloakbd::Result<()> {
    let catalog = ClassCatalog::base();
    let benign = generate_corpus(1, 300, &FactorDistribution::default(), &catalog)?;

    for mode in [PoisonMode::Omit, PoisonMode::KeepAndFlip] {
        let policy = PoisonPolicy { mode, ..PoisonPolicy::default() };
        let mix = build_training_mixture(&benign, &policy, &catalog, 2)?;
        println!(
            "{mode}: {} benign + {} poisoned, share {:.4}",
            mix.benign_samples.len(),
            mix.poisoned_samples.len(),
            mix.poisoned_share()
        );
        let p = &mix.poisoned_samples[0];
        println!(
            "  first poisoned scene: {} rendered triggers, {} annotations, {} flip-marked",
            p.rendered_trigger_boxes().len(),
            p.objects.len(),
            p.objects.iter().filter(|o| o.flip).count()
        );
    }
    Ok(())
}
