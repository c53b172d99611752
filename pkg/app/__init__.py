# App package 