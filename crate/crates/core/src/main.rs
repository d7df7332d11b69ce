fn main() {
    println!("overmark CLI placeholder");
}
