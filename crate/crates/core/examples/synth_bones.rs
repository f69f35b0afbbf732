//! Renders stick figures for several species and checks that the bone
//! profile measured from their keypoints matches the generator's.
//!
//! Writes `bones.svg` under `$CDAPOSE_OUTPUT/examples`.

use cdapose::commands::output_root;
use cdapose::datasets::bones::compute_bone_proportions;
use cdapose::datasets::synth::{generate_domain, SynthDomainSpec};
use cdapose::eval::report::plot_profiles;
use cdapose::schema::FIGURE_BONES;
use cdapose::Domain;

fn main() -> cdapose::Result<()> {
    let mut specs = vec![SynthDomainSpec::human(300, 1)];
    for (i, species) in ["dog", "horse", "cow", "sheep"].into_iter().enumerate() {
        specs.push(SynthDomainSpec::animal(species, Domain::AnimalLabeled, 300, 10 + i as u64)?);
    }

    let mut profiles = Vec::new();
    for spec in &specs {
        let (set, _) = generate_domain(spec)?;
        let report = compute_bone_proportions(&set, &FIGURE_BONES)?;
        let l1 = report.l1(&spec.species, &spec.proportions).unwrap_or(f64::NAN);
        println!("{:<6} {} instances, L1 to generator profile {l1:.4}", spec.species, set.len());
        profiles.push((spec.species.clone(), report.classes[&spec.species].proportions.clone()));
    }

    let dir = output_root().join("examples");
    std::fs::create_dir_all(&dir).map_err(|e| cdapose::Error::io(&dir, e))?;
    plot_profiles(&profiles, &dir.join("bones.svg"))?;
    println!("profiles plotted to {}", dir.join("bones.svg").display());
    Ok(())
}
