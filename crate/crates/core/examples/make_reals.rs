//! Writes stand-in "real" reference images for a dataset using the mock
//! text-to-image backend, laid out as `<out>/<entity slug>/<n>.png`.
//!
//! cargo run -p kg2mmkg-core --example make_reals -- data/mini-kg data/mini-kg/reals

use std::path::PathBuf;

use kg2mmkg_core::backends::{ImageGenerator, MockImageGenerator};
use kg2mmkg_core::kg::{self, EntityId};
use kg2mmkg_core::pipeline::entity_slug;
use kg2mmkg_core::util::atomic_write;

const PER_ENTITY: u64 = 2;
const SIZE: u32 = 64;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let (Some(dataset), Some(out)) = (args.next(), args.next()) else {
        eprintln!("usage: make_reals <dataset dir> <output dir>");
        std::process::exit(2);
    };
    let g = kg::load_dir(&PathBuf::from(dataset))?;
    let t2i = MockImageGenerator::new(7919);
    let out = PathBuf::from(out);
    for e in (0..g.num_entities() as u32).map(EntityId) {
        let label = g.entity_label(e);
        let prompt = format!("A photograph of {}", g.display_name(e));
        for n in 0..PER_ENTITY {
            let img = t2i.generate(&prompt, n, SIZE, SIZE)?;
            atomic_write(&out.join(entity_slug(label)).join(format!("{n}.png")), &img.bytes)?;
        }
    }
    println!("wrote {} entities to {}", g.num_entities(), out.display());
    Ok(())
}
