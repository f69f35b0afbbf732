//! Round-trips a synthetic set through COCO-style JSON and re-expresses it
//! in the 17-keypoint human schema.

use cdapose::datasets::coco::{parse_annotations, write_annotations};
use cdapose::datasets::synth::{generate_domain, SynthDomainSpec};
use cdapose::{Domain, SkeletonSchema};

fn main() -> cdapose::Result<()> {
    let spec = SynthDomainSpec::animal("horse", Domain::AnimalLabeled, 20, 4)?;
    let (set, _) = generate_domain(&spec)?;

    let dir = std::env::temp_dir().join("cdapose-ingest-example");
    std::fs::create_dir_all(&dir).map_err(|e| cdapose::Error::io(&dir, e))?;
    let path = dir.join("annotations.json");
    write_annotations(&set, &path)?;
    let back = parse_annotations(&path, true)?;
    assert_eq!(back.len(), set.len());

    let human = SkeletonSchema::coco17();
    let aligned = back.aligned_to(&human)?;
    let annotated = |s: &cdapose::datasets::AnnotationSet| -> usize {
        s.instances.iter().filter_map(|i| i.pose.as_ref()).map(|p| p.annotated_count()).sum()
    };
    println!(
        "{} instances: {} keypoints as {} ({} annotated), {} as {} ({} annotated)",
        back.len(),
        back.schema.d(),
        back.schema.name,
        annotated(&back),
        aligned.schema.d(),
        aligned.schema.name,
        annotated(&aligned),
    );
    for (i, name) in back.schema.keypoint_names.iter().enumerate() {
        let to = back.schema.alignment.as_ref().and_then(|a| a.map[i]);
        println!("  {name:<18} -> {}", to.map_or("(dropped)", |j| human.keypoint_names[j].as_str()));
    }
    Ok(())
}
