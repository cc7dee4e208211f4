# src package marker
