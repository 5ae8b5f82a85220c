fn main() {
    println!("tractstat");
}
