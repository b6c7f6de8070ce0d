fn main() {
    println!("pcwm");
}
