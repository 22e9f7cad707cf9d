"""Classical flow, asymptotic velocities and Liouville sampling"""
