# Simulator tests package
