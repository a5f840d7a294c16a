namespace refanim {
}
