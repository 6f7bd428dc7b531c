fn main() {
    eprintln!("sensor: not yet implemented");
    std::process::exit(2);
}
