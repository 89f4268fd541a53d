from lab import Lab

Lab().run()
