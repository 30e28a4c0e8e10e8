fn main() {
    println!("mtpd");
}
