fn main() {
    println!("fics: under construction");
}
