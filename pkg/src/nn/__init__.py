# nn package marker
