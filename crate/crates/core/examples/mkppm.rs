//! Scratch helper: write seeded synthetic PPMs for manual CLI smoke tests.
use sapm_core::ppm::write_ppm;
use sapm_core::synth::synth_image;

fn main() {
    let mut args = std::env::args().skip(1);
    let dir = args.next().expect("dir");
    let n: usize = args.next().expect("count").parse().unwrap();
    let size: usize = args.next().expect("size").parse().unwrap();
    std::fs::create_dir_all(&dir).unwrap();
    for i in 0..n {
        let img = synth_image(size, size, 7000 + i as u64);
        write_ppm(std::path::Path::new(&format!("{dir}/img{i:03}.ppm")), &img).unwrap();
    }
}
