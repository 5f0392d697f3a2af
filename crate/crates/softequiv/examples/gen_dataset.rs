//! Generate the synthetic shape dataset and inspect a few samples.
//!
//!     cargo run -p softequiv --example gen_dataset

use softequiv::data::{gen_data, SyntheticSpec, SHAPE_NAMES};

fn main() {
    let spec = SyntheticSpec {
        n_images: 512,
        ..SyntheticSpec::default()
    };
    let out = std::env::temp_dir().join("softequiv_example.serd");
    let ds = gen_data(&spec, 42, &out).expect("dataset generation");
    println!(
        "wrote {} images of side {} to {}",
        ds.len(),
        ds.height,
        out.display()
    );

    // every image carries a class label (shape identity, invariant under
    // rotation) and an orientation label (the rendered quarter-turn)
    for i in 0..6 {
        println!(
            "image {i}: class {} ({}), orientation {} quarter-turns",
            ds.class_of(i),
            SHAPE_NAMES[ds.class_of(i)],
            ds.orientation_of(i)
        );
    }

    // crude ascii view of the first image's red channel
    let img = &ds.images[0];
    println!("\nimage 0, red channel:");
    for y in (0..ds.height).step_by(1) {
        let row: String = (0..ds.width)
            .map(|x| {
                let v = img.data[(y * ds.width + x) * 3];
                if v > 0.25 {
                    '#'
                } else {
                    '.'
                }
            })
            .collect();
        println!("  {row}");
    }
}
